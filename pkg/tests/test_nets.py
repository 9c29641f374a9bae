import math

import numpy as np
import pytest
import torch

from deskrl.nets import (
    Encoder,
    ClassifierNet,
    EnsembleLinear,
    PolicyHead,
    QEnsemble,
    StateFeaturizer,
    augment,
    grad_step,
    images_to_tensor,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    spectral_norms,
)

torch.manual_seed(0)


def rand_images(b=4, dtype=torch.uint8):
    g = torch.Generator().manual_seed(1)
    img = torch.randint(0, 256, (b, 3, 84, 84), generator=g, dtype=torch.int64)
    return img.to(dtype)


class TestAugment:
    def test_zero_shift_is_identity(self):
        x = rand_images()
        shifts = torch.zeros(4, 2, dtype=torch.long)
        assert torch.equal(augment(x, shifts=shifts), x)

    def test_shape_dtype_range_preserved(self):
        x = rand_images()
        g = torch.Generator().manual_seed(2)
        y = augment(x, generator=g)
        assert y.shape == x.shape and y.dtype == x.dtype
        assert y.min() >= 0 and y.max() <= 255

    def test_max_displacement_bounded(self):
        # A delta image: the bright pixel can move at most MAX_SHIFT cells.
        x = torch.zeros(64, 3, 84, 84)
        x[:, :, 40, 40] = 1.0
        g = torch.Generator().manual_seed(3)
        y = augment(x, generator=g)
        for i in range(64):
            pos = (y[i, 0] == 1.0).nonzero()
            assert len(pos) == 1
            dy, dx = (pos[0] - 40).tolist()
            assert abs(dy) <= 4 and abs(dx) <= 4

    def test_shift_distribution_covers_support(self):
        x = torch.zeros(1000, 1, 84, 84)
        x[:, :, 40, 40] = 1.0
        g = torch.Generator().manual_seed(4)
        y = augment(x, generator=g)
        seen_dy, seen_dx = set(), set()
        for i in range(1000):
            pos = (y[i, 0] == 1.0).nonzero()[0]
            seen_dy.add(int(pos[0]) - 40)
            seen_dx.add(int(pos[1]) - 40)
        assert seen_dy == set(range(-4, 5))
        assert seen_dx == set(range(-4, 5))

    def test_explicit_shift_translates(self):
        x = torch.zeros(1, 1, 84, 84)
        x[0, 0, 40, 40] = 1.0
        y = augment(x, shifts=torch.tensor([[2, -3]]))
        # Crop origin moves by (+2, -3): content moves by (-2, +3).
        assert y[0, 0, 38, 43] == 1.0


class TestEncoder:
    def test_deterministic_and_bounded(self):
        enc = Encoder()
        enc.eval()
        img = rand_images(2).float()
        proprio = torch.randn(2, 3)
        f1 = enc(img, proprio)
        f2 = enc(img, proprio)
        assert torch.equal(f1, f2)
        assert f1[:, :50].abs().max() <= 1.0

    def test_proprio_passthrough(self):
        enc = Encoder()
        img = rand_images(2).float()
        proprio = torch.tensor([[0.1, -0.2, 0.7], [0.0, 0.5, 1.0]])
        f = enc(img, proprio)
        assert torch.equal(f[:, 50:], proprio)

    def test_dual_view_channels(self):
        enc = Encoder(n_views=2)
        img = torch.rand(2, 6, 84, 84) * 255
        f = enc(img, torch.zeros(2, 3))
        assert f.shape == (2, 53)

    def test_state_featurizer_identity(self):
        sf = StateFeaturizer()
        sv = torch.randn(3, 8)
        pr = torch.randn(3, 3)
        f = sf(sv, pr)
        assert torch.equal(f[:, :8], sv)
        assert torch.equal(f[:, 8:], pr)

    def test_images_to_tensor_layout(self):
        arr = np.zeros((2, 84, 84, 3), dtype=np.uint8)
        arr[0, 1, 2, 0] = 255
        t = images_to_tensor(arr)
        assert t.shape == (2, 3, 84, 84)
        assert t[0, 0, 1, 2] == 255.0


class TestPolicyHead:
    def test_actions_in_range(self):
        head = PolicyHead(feature_dim=11, hidden_dim=32, n_layers=2)
        g = torch.Generator().manual_seed(0)
        a, logp = head.sample(torch.randn(64, 11), generator=g)
        assert a.abs().max() <= 1.0
        assert torch.isfinite(logp).all()

    def test_low_noise_limit_concentrates_at_zero(self):
        head = PolicyHead(feature_dim=4, hidden_dim=8, n_layers=1)
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
            head.trunk[-1].bias[3:] = -20.0  # log-std below the clamp floor
        g = torch.Generator().manual_seed(1)
        a, _ = head.sample(torch.zeros(256, 4), generator=g)
        assert a.abs().max() < 1e-3

    def test_seeded_determinism(self):
        head = PolicyHead(feature_dim=5, hidden_dim=16, n_layers=1)
        feat = torch.randn(8, 5)
        a1, l1 = head.sample(feat, generator=torch.Generator().manual_seed(7))
        a2, l2 = head.sample(feat, generator=torch.Generator().manual_seed(7))
        assert torch.equal(a1, a2) and torch.equal(l1, l2)

    def test_density_integrates_to_one(self):
        # Grid quadrature over a 1-D action space.
        head = PolicyHead(feature_dim=3, action_dim=1, hidden_dim=16, n_layers=1).double()
        feat = torch.randn(1, 3, dtype=torch.float64)
        grid = torch.linspace(-1 + 1e-4, 1 - 1e-4, 20001, dtype=torch.float64).unsqueeze(1)
        with torch.no_grad():
            logp = head.log_prob(feat.expand(len(grid), 3), grid)
        mass = torch.trapezoid(logp.exp(), grid.squeeze(1))
        assert abs(float(mass) - 1.0) <= 0.02

    def test_log_prob_finite_at_boundary(self):
        head = PolicyHead(feature_dim=3, hidden_dim=16, n_layers=1)
        feat = torch.randn(2, 3)
        actions = torch.tensor([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0]])
        assert torch.isfinite(head.log_prob(feat, actions)).all()

    def test_mean_action_matches_zero_noise(self):
        head = PolicyHead(feature_dim=3, hidden_dim=16, n_layers=1)
        feat = torch.randn(4, 3)
        mean = head.mean_action(feat)
        assert mean.abs().max() <= 1.0


class TestQEnsemble:
    def test_heads_share_no_parameters(self):
        q = QEnsemble(feature_dim=11, n_heads=4, hidden_dim=16, n_layers=2)
        feat = torch.randn(8, 11)
        act = torch.randn(8, 3)
        out = q(feat, act)
        assert out.shape == (4, 8)
        # Perturbing one head's slice changes only that head's output.
        with torch.no_grad():
            q.net[0].weight[2] += 1.0
        out2 = q(feat, act)
        changed = (out2 - out).abs().sum(dim=1)
        assert changed[2] > 0
        assert changed[[0, 1, 3]].max() == 0

    def test_ensemble_linear_matches_loop(self):
        el = EnsembleLinear(3, 5, 7)
        x = torch.randn(4, 5)
        out = el(x)
        for n in range(3):
            ref = x @ el.weight[n] + el.bias[n]
            assert torch.allclose(out[n], ref, atol=1e-6)


def toy_logistic_net():
    """10-parameter toy: 3->3 linear + 3->1 linear on top, double precision."""
    net = torch.nn.Sequential(torch.nn.Linear(3, 2), torch.nn.Tanh(), torch.nn.Linear(2, 1))
    return net.double()


class TestGradStep:
    def test_quadratic_bowl_converges(self):
        x = torch.nn.Parameter(torch.tensor([3.0, -2.0]))
        opt = make_optimizer([x], lr=0.05)
        dist = [float(x.norm())]
        for _ in range(100):
            loss = (x**2).sum()
            grad_step(loss, [opt], [x])
            dist.append(float(x.data.norm()))
        assert dist[-1] < dist[0]
        assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))

    def test_zero_gradient_leaves_parameters(self):
        x = torch.nn.Parameter(torch.tensor([1.0, 2.0]))
        opt = make_optimizer([x], lr=0.1)
        before = x.data.clone()
        loss = (x * 0.0).sum()
        norm, skipped = grad_step(loss, [opt], [x])
        assert not skipped
        assert torch.equal(x.data, before)

    def test_nonfinite_gradient_skipped_and_flagged(self):
        x = torch.nn.Parameter(torch.tensor([0.0]))
        opt = make_optimizer([x], lr=0.1)
        before = x.data.clone()
        loss = torch.log(x).sum()  # grad 1/x -> inf at 0
        norm, skipped = grad_step(loss, [opt], [x])
        assert skipped
        assert torch.equal(x.data, before)

    def test_cross_entropy_gradient_matches_finite_differences(self):
        torch.manual_seed(3)
        net = toy_logistic_net()
        xs = torch.randn(16, 3, dtype=torch.float64)
        ys = (torch.rand(16) > 0.5).double()

        def loss_fn():
            logits = net(xs).squeeze(-1)
            return torch.nn.functional.binary_cross_entropy_with_logits(logits, ys)

        loss = loss_fn()
        loss.backward()
        h = 1e-6
        for p in net.parameters():
            analytic = p.grad.clone()
            fd = torch.zeros_like(p)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                dn = float(loss_fn())
                flat[i] = orig
                fd.view(-1)[i] = (up - dn) / (2 * h)
            denom = analytic.abs().clamp_min(1e-8)
            rel = ((analytic - fd).abs() / denom).max()
            assert float(rel) <= 1e-4


class TestClassifierNet:
    def test_state_mode_shapes(self):
        net = ClassifierNet(mode="state", input_spec="image_plus_proprio")
        logits = net(torch.randn(6, 8), torch.randn(6, 3))
        assert logits.shape == (6,)

    def test_proprio_required_when_specified(self):
        net = ClassifierNet(mode="state", input_spec="image_plus_proprio")
        with pytest.raises(ValueError):
            net(torch.randn(2, 8))

    def test_image_only_ignores_proprio_slot(self):
        net = ClassifierNet(mode="state", input_spec="image_only")
        out = net(torch.randn(2, 8))
        assert out.shape == (2,)

    def test_spectral_norm_bound_after_updates(self):
        torch.manual_seed(4)
        net = ClassifierNet(mode="state", input_spec="image_plus_proprio", hidden_dim=64)
        opt = make_optimizer(net.parameters(), lr=1e-3)
        for step in range(50):
            x = torch.randn(32, 8)
            pr = torch.randn(32, 3)
            y = (torch.rand(32) > 0.5).float()
            loss = torch.nn.functional.binary_cross_entropy_with_logits(net(x, pr), y)
            grad_step(loss, [opt], list(net.parameters()))
            net.tighten_constraint()
            assert max(spectral_norms(net)) <= 1.0 + 1e-3

    def test_pixel_classifier_spectral_norm(self):
        torch.manual_seed(5)
        net = ClassifierNet(mode="pixel", input_spec="image_only", hidden_dim=32)
        opt = make_optimizer(net.parameters(), lr=1e-3)
        for _ in range(3):
            x = torch.rand(4, 3, 84, 84) * 255
            y = (torch.rand(4) > 0.5).float()
            loss = torch.nn.functional.binary_cross_entropy_with_logits(net(x), y)
            grad_step(loss, [opt], list(net.parameters()))
            net.tighten_constraint()
            assert max(spectral_norms(net)) <= 1.0 + 1e-3


class TestCheckpoint:
    def test_round_trip_restores_forward_pass(self, tmp_path):
        torch.manual_seed(6)
        head = PolicyHead(feature_dim=5, hidden_dim=16, n_layers=1)
        opt = make_optimizer(head.parameters())
        feat = torch.randn(4, 5)
        # Take a step so optimizer state is nontrivial.
        a, logp = head.sample(feat, generator=torch.Generator().manual_seed(0))
        grad_step((-logp).mean(), [opt], list(head.parameters()))
        ref = head.mean_action(feat).detach().clone()
        p = tmp_path / "ck.pt"
        save_checkpoint(p, {"policy": head}, {"policy": opt}, meta={"step": 1})
        with torch.no_grad():
            for param in head.parameters():
                param.add_(1.0)
        assert not torch.equal(head.mean_action(feat), ref)
        payload = load_checkpoint(p, {"policy": head}, {"policy": opt})
        assert torch.equal(head.mean_action(feat), ref)
        assert payload["meta"]["step"] == 1

    def test_version_mismatch_rejected(self, tmp_path):
        head = PolicyHead(feature_dim=5, hidden_dim=16, n_layers=1)
        p = tmp_path / "ck.pt"
        save_checkpoint(p, {"policy": head})
        payload = torch.load(p, weights_only=False)
        payload["format_version"] = 999
        torch.save(payload, p)
        with pytest.raises(ValueError, match="999"):
            load_checkpoint(p, {"policy": head})
