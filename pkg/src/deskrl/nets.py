"""Function-approximation substrate: encoders, policy and critic heads,
classifier networks, image augmentation, and the gradient-step contract.

Everything is a plain torch module. Randomness that matters for
reproducibility (action sampling, augmentation shifts) goes through explicit
torch Generators owned by the caller.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .env import ACTION_DIM, IMAGE_SIZE, PROPRIO_DIM, STATE_DIM

FEATURE_DIM = 50
MAX_SHIFT = 4
LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
_ATANH_CLAMP = 1.0 - 1e-6

CHECKPOINT_FORMAT_VERSION = 1


# -- image augmentation --------------------------------------------------------


def augment(
    images: torch.Tensor,
    shifts: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Random crop-and-shift: replicate-pad by MAX_SHIFT, crop back to the
    original size at a per-image random origin. Net effect is a translation
    of at most MAX_SHIFT pixels per axis. Shape, dtype, and value range are
    preserved.

    ``shifts`` (B, 2) with entries in [-MAX_SHIFT, MAX_SHIFT] pins the
    translation explicitly (used by tests); otherwise it is drawn uniformly.
    """
    if images.dim() != 4:
        raise ValueError("augment expects (B, C, H, W) images")
    b, _, h, w = images.shape
    if shifts is None:
        shifts = torch.randint(-MAX_SHIFT, MAX_SHIFT + 1, (b, 2), generator=generator)
    else:
        if shifts.shape != (b, 2) or shifts.abs().max() > MAX_SHIFT:
            raise ValueError("shifts must be (B, 2) with |shift| <= MAX_SHIFT")
    orig_dtype = images.dtype
    padded = F.pad(images.float(), (MAX_SHIFT,) * 4, mode="replicate")
    out = torch.empty_like(images, dtype=torch.float32)
    for i in range(b):
        dy = MAX_SHIFT + int(shifts[i, 0])
        dx = MAX_SHIFT + int(shifts[i, 1])
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out.to(orig_dtype)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (B, H, W, C) numpy batch -> float32 (B, C, H, W) tensor in [0, 255]."""
    return torch.from_numpy(images).permute(0, 3, 1, 2).float()


# -- encoders ------------------------------------------------------------------


class Encoder(nn.Module):
    """Convolutional pixel encoder fused with proprioception.

    Four 3x3 stride-1 convolutions with 32 filters, flattened into a
    FEATURE_DIM projection with layer norm and tanh, so the learned part of
    the feature lives in [-1, 1]. Multi-view inputs are concatenated
    channel-wise before the stack.
    """

    def __init__(self, n_views: int = 1):
        super().__init__()
        self.n_views = n_views
        c_in = 3 * n_views
        self.convs = nn.Sequential(
            nn.Conv2d(c_in, 32, 3, stride=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, stride=1), nn.ReLU(),
        )
        side = IMAGE_SIZE - 8  # four valid 3x3 convolutions
        self.proj = nn.Linear(32 * side * side, FEATURE_DIM)
        self.norm = nn.LayerNorm(FEATURE_DIM)
        self.output_dim = FEATURE_DIM + PROPRIO_DIM

    def forward(self, images: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        x = images / 255.0 - 0.5
        z = self.convs(x).flatten(1)
        z = torch.tanh(self.norm(self.proj(z)))
        return torch.cat([z, proprio], dim=-1)


class StateFeaturizer(nn.Module):
    """State-mode stand-in for the encoder: identity concatenation."""

    def __init__(self, state_dim: int = STATE_DIM):
        super().__init__()
        self.output_dim = state_dim + PROPRIO_DIM

    def forward(self, state_vec: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        return torch.cat([state_vec, proprio], dim=-1)


def mlp(in_dim: int, hidden_dim: int, n_layers: int, out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(n_layers):
        layers += [nn.Linear(d, hidden_dim), nn.ReLU()]
        d = hidden_dim
    layers.append(nn.Linear(d, out_dim))
    return nn.Sequential(*layers)


# -- policy --------------------------------------------------------------------


class PolicyHead(nn.Module):
    """Tanh-squashed Gaussian policy head.

    The pre-squash distribution is diagonal Gaussian with state-dependent
    mean and log-std (log-std clamped to [LOG_STD_MIN, LOG_STD_MAX]); the
    tanh squash keeps sampled actions inside [-1, 1] and the log-density
    correction uses the numerically stable softplus form.
    """

    def __init__(self, feature_dim: int, action_dim: int = ACTION_DIM,
                 hidden_dim: int = 1024, n_layers: int = 4):
        super().__init__()
        self.action_dim = action_dim
        self.trunk = mlp(feature_dim, hidden_dim, n_layers, 2 * action_dim)

    def _dist_params(self, feature: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, log_std = self.trunk(feature).chunk(2, dim=-1)
        return mu, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    @staticmethod
    def _log_prob_from_pre_tanh(u: torch.Tensor, mu: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
        std = log_std.exp()
        gauss = -0.5 * (((u - mu) / std) ** 2) - log_std - 0.5 * math.log(2 * math.pi)
        # log(1 - tanh(u)^2) in a form that never sees log(0).
        squash = 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
        return (gauss - squash).sum(-1)

    def sample(
        self, feature: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized action sample and its log-density."""
        mu, log_std = self._dist_params(feature)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        u = mu + log_std.exp() * eps
        action = torch.tanh(u)
        return action, self._log_prob_from_pre_tanh(u, mu, log_std)

    def log_prob(self, feature: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """Density of an externally supplied in-range action (finite for all
        actions in [-1, 1]; the inverse squash is clamped)."""
        mu, log_std = self._dist_params(feature)
        u = torch.atanh(action.clamp(-_ATANH_CLAMP, _ATANH_CLAMP))
        return self._log_prob_from_pre_tanh(u, mu, log_std)

    def mean_action(self, feature: torch.Tensor) -> torch.Tensor:
        mu, _ = self._dist_params(feature)
        return torch.tanh(mu)


# -- critics -------------------------------------------------------------------


class EnsembleLinear(nn.Module):
    """N parallel, parameter-disjoint linear maps evaluated in one bmm."""

    def __init__(self, n: int, in_dim: int, out_dim: int):
        super().__init__()
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = nn.Parameter(torch.empty(n, in_dim, out_dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(n, 1, out_dim).uniform_(-bound, bound))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:  # shared input across heads
            x = x.unsqueeze(0).expand(self.weight.shape[0], -1, -1)
        return torch.baddbmm(self.bias, x, self.weight)


class QEnsemble(nn.Module):
    """N independent critics mapping (feature, action) -> scalar.

    Heads share no parameters; evaluation is vectorized across heads. Target
    copies are plain deep copies created by the agent and updated only
    through its EMA step.
    """

    def __init__(self, feature_dim: int, n_heads: int, action_dim: int = ACTION_DIM,
                 hidden_dim: int = 1024, n_layers: int = 4):
        super().__init__()
        self.n_heads = n_heads
        layers: list[nn.Module] = []
        d = feature_dim + action_dim
        for _ in range(n_layers):
            layers += [EnsembleLinear(n_heads, d, hidden_dim), nn.ReLU()]
            d = hidden_dim
        layers.append(EnsembleLinear(n_heads, d, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, feature: torch.Tensor, action: torch.Tensor) -> torch.Tensor:
        """Returns per-head values, shape (n_heads, B)."""
        x = torch.cat([feature, action], dim=-1)
        return self.net(x).squeeze(-1)


# -- classifier ----------------------------------------------------------------


class ClassifierNet(nn.Module):
    """Discriminator network with a spectral-norm constraint on every map.

    ``input_spec`` follows the discriminator wiring: ``image_only`` consumes
    just the observation payload, ``image_plus_proprio`` appends the
    proprioceptive vector. In state mode the payload slot carries the raw
    state vector and the convolutional stack is replaced by identity.
    """

    def __init__(self, mode: str, input_spec: str, hidden_dim: int = 256, n_views: int = 1):
        super().__init__()
        if mode not in ("state", "pixel"):
            raise ValueError(f"mode must be state/pixel, got {mode!r}")
        if input_spec not in ("image_only", "image_plus_proprio"):
            raise ValueError(f"unknown input_spec {input_spec!r}")
        self.mode = mode
        self.input_spec = input_spec
        extra = PROPRIO_DIM if input_spec == "image_plus_proprio" else 0
        if mode == "pixel":
            self.convs = nn.Sequential(
                spectral_norm(nn.Conv2d(3 * n_views, 32, 3, stride=1)), nn.ReLU(),
                spectral_norm(nn.Conv2d(32, 32, 3, stride=1)), nn.ReLU(),
            )
            side = IMAGE_SIZE - 4  # two valid 3x3 convolutions
            self.proj = spectral_norm(nn.Linear(32 * side * side, FEATURE_DIM))
            head_in = FEATURE_DIM + extra
        else:
            self.convs = None
            self.proj = None
            head_in = STATE_DIM + extra
        self.head = nn.Sequential(
            spectral_norm(nn.Linear(head_in, hidden_dim)), nn.ReLU(),
            spectral_norm(nn.Linear(hidden_dim, hidden_dim)), nn.ReLU(),
            spectral_norm(nn.Linear(hidden_dim, 1)),
        )

    def forward(self, payload: torch.Tensor, proprio: torch.Tensor | None = None) -> torch.Tensor:
        """Returns the logit, shape (B,)."""
        if self.mode == "pixel":
            z = self.convs(payload / 255.0 - 0.5).flatten(1)
            z = torch.tanh(self.proj(z))
        else:
            z = payload
        if self.input_spec == "image_plus_proprio":
            if proprio is None:
                raise ValueError("this classifier requires proprio input")
            z = torch.cat([z, proprio], dim=-1)
        return self.head(z).squeeze(-1)

    def constrained_modules(self) -> list[nn.Module]:
        mods = [m for m in self.modules() if isinstance(m, (nn.Linear, nn.Conv2d))]
        return mods

    def tighten_constraint(self, tol: float = 1e-9, max_iters: int = 500):
        """Re-run the persistent power iteration after a parameter update
        until the singular-value estimate stabilizes, keeping the normalized
        weight's top singular value within tolerance of 1."""
        was_training = self.training
        self.train()
        with torch.no_grad():
            for m in self.constrained_modules():
                raw = m.parametrizations.weight.original
                probe = int(raw.abs().flatten().argmax())
                prev = None
                for _ in range(max_iters):
                    eff = m.weight  # each access advances the power iteration
                    sigma = float(raw.flatten()[probe] / eff.flatten()[probe])
                    if prev is not None and abs(sigma - prev) <= tol * max(1.0, abs(sigma)):
                        break
                    prev = sigma
        self.train(was_training)


def spectral_norms(classifier: ClassifierNet) -> list[float]:
    """Exact top singular value of every constrained layer's effective weight
    (convolution kernels flattened to a matrix, as the constraint defines)."""
    out = []
    with torch.no_grad():
        for m in classifier.constrained_modules():
            w = m.weight.flatten(1) if m.weight.dim() > 2 else m.weight
            out.append(float(torch.linalg.matrix_norm(w, 2)))
    return out


# -- gradient step -------------------------------------------------------------


def grad_step(
    loss: torch.Tensor,
    optimizers: list[torch.optim.Optimizer],
    parameters: list[torch.Tensor],
) -> tuple[float, bool]:
    """One first-order adaptive-moment update on ``parameters``.

    Backpropagates ``loss``, and if every gradient is finite steps all the
    optimizers; otherwise the step is skipped and flagged. Returns
    (global grad norm, skipped).
    """
    for opt in optimizers:
        opt.zero_grad(set_to_none=True)
    loss.backward()
    sq = 0.0
    finite = True
    for p in parameters:
        if p.grad is None:
            continue
        g = p.grad
        if not torch.isfinite(g).all():
            finite = False
            break
        sq += float(g.pow(2).sum())
    if not finite:
        for opt in optimizers:
            opt.zero_grad(set_to_none=True)
        return float("nan"), True
    for opt in optimizers:
        opt.step()
    return math.sqrt(sq), False


def make_optimizer(params, lr: float = 1e-4) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    modules: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
    rng: dict | None = None,
    meta: dict | None = None,
):
    """Versioned container: named parameter arrays, optimizer state, RNG
    state. Reloading restores bit-identical forward passes."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "modules": {k: m.state_dict() for k, m in modules.items()},
        "optimizers": {k: o.state_dict() for k, o in (optimizers or {}).items()},
        "rng": rng or {},
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(
    path: str | Path,
    modules: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer] | None = None,
) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint format version mismatch: file has {version}, "
            f"this build reads {CHECKPOINT_FORMAT_VERSION}"
        )
    for k, m in modules.items():
        m.load_state_dict(payload["modules"][k])
    for k, o in (optimizers or {}).items():
        o.load_state_dict(payload["optimizers"][k])
    return payload
