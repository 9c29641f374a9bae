"""The RL update engine.

One :class:`Agent` owns a policy, a featurizer, an ensemble of critics with
EMA target copies, and their optimizers. Critic targets take the minimum over
a freshly sampled subset of target heads; the policy maximizes the mean
critic value plus a decaying behaviour-cloning term on expert data. The
featurizer receives gradient only through the critic loss.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import DemoSet, ReplayBuffer, TransitionBatch, compose_batch
from .env import ACTION_DIM, Action, Observation
from .nets import (
    Encoder,
    PolicyHead,
    QEnsemble,
    StateFeaturizer,
    augment,
    grad_step,
    images_to_tensor,
    make_optimizer,
)

log = logging.getLogger(__name__)


@dataclass
class AgentConfig:
    n_critics: int = 10  # ensemble size
    target_subset: int = 2  # heads drawn per target computation
    gamma: float = 0.99
    tau: float = 0.01  # EMA rate for target tracking
    rho: float = 0.25  # expert oversampling fraction
    batch_size: int = 256
    utd: int = 3  # critic updates per environment step
    lambda_start: float = 1.0
    lambda_end: float = 0.1
    lambda_decay_steps: int = 50_000
    entropy_mode: str = "auto"  # auto | fixed | off
    entropy_coef: float = 0.1  # used when entropy_mode == "fixed"
    warmup_steps: int = 1000
    lr: float = 1e-4
    hidden_dim: int = 1024
    n_layers: int = 4
    per_sample_subset: bool = False

    def __post_init__(self):
        if not 1 <= self.target_subset <= self.n_critics:
            raise ValueError("need 1 <= target_subset <= n_critics")
        if self.utd < 1:
            raise ValueError("utd must be >= 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.entropy_mode not in ("auto", "fixed", "off"):
            raise ValueError(f"unknown entropy_mode {self.entropy_mode!r}")


@dataclass(frozen=True)
class LossReport:
    """Immutable summary of one training tick."""

    bellman_loss: float | None = None
    policy_q_term: float | None = None
    bc_term: float | None = None
    entropy: float | None = None
    alpha: float | None = None
    grad_norms: dict = field(default_factory=dict)
    n_bellman_updates: int = 0
    n_policy_updates: int = 0
    skipped: bool = False

    def is_finite(self) -> bool:
        vals = [self.bellman_loss, self.policy_q_term, self.bc_term, self.entropy]
        return all(v is None or math.isfinite(v) for v in vals)


def lambda_at(
    step: int, start: float = 1.0, end: float = 0.1, decay_steps: int = 50_000
) -> float:
    """Behaviour-cloning coefficient: linear decay, then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= decay_steps:
        return end
    frac = step / decay_steps
    return start + (end - start) * frac


def subset_min(
    values: torch.Tensor,
    m: int,
    generator: torch.Generator | None = None,
    per_sample: bool = False,
    indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """Minimum over a random size-``m`` subset of the head axis.

    ``values`` is (N, B). By default one subset is drawn and shared across
    the batch; ``per_sample`` draws an independent subset per column.
    Explicit ``indices`` override the draw (tests).
    """
    n = values.shape[0]
    if not 1 <= m <= n:
        raise ValueError("need 1 <= m <= n_heads")
    if indices is not None:
        return values[indices].min(dim=0).values
    if per_sample:
        scores = torch.rand(n, values.shape[1], generator=generator)
        chosen = scores.topk(m, dim=0).indices
        return values.gather(0, chosen).min(dim=0).values
    idx = torch.randperm(n, generator=generator)[:m]
    return values[idx].min(dim=0).values


def td_target(
    rewards: torch.Tensor,
    target_values: torch.Tensor,
    gamma: float,
    m: int,
    generator: torch.Generator | None = None,
    log_prob: torch.Tensor | None = None,
    alpha: float = 0.0,
    per_sample: bool = False,
    indices: torch.Tensor | None = None,
) -> torch.Tensor:
    """r + gamma * (subset-min target value - alpha * log pi(a'|s'))."""
    if not torch.isfinite(rewards).all():
        raise ValueError("rewards must be finite")
    v = subset_min(target_values, m, generator, per_sample, indices)
    if log_prob is not None and alpha > 0.0:
        v = v - alpha * log_prob
    return rewards + gamma * v


def ema_update(online: torch.nn.Module, target: torch.nn.Module, tau: float):
    """target <- tau * online + (1 - tau) * target, parameter-wise."""
    op = list(online.parameters())
    tp = list(target.parameters())
    if len(op) != len(tp):
        raise ValueError("online/target parameter structures differ")
    with torch.no_grad():
        for o, t in zip(op, tp):
            if o.shape != t.shape:
                raise ValueError("online/target parameter shapes differ")
            t.mul_(1.0 - tau).add_(o, alpha=tau)


class Agent:
    """Policy + critic ensemble for one direction (doing or undoing)."""

    def __init__(self, obs_mode: str, config: AgentConfig, seed: int, n_views: int = 1):
        self.obs_mode = obs_mode
        self.config = config
        self.torch_gen = torch.Generator().manual_seed(seed)
        self.np_rng = np.random.default_rng(seed)

        # Weight initialization draws from the global stream; fork it so the
        # same seed always builds the same networks.
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            if obs_mode == "pixel":
                self.featurizer: torch.nn.Module = Encoder(n_views=n_views)
            else:
                self.featurizer = StateFeaturizer()
            feat_dim = self.featurizer.output_dim
            self.policy = PolicyHead(
                feat_dim, ACTION_DIM, hidden_dim=config.hidden_dim, n_layers=config.n_layers
            )
            self.q = QEnsemble(
                feat_dim,
                config.n_critics,
                ACTION_DIM,
                hidden_dim=config.hidden_dim,
                n_layers=config.n_layers,
            )
        self.q_target = copy.deepcopy(self.q)
        for p in self.q_target.parameters():
            p.requires_grad_(False)

        self.q_opt = make_optimizer(self.q.parameters(), config.lr)
        self.policy_opt = make_optimizer(self.policy.parameters(), config.lr)
        enc_params = list(self.featurizer.parameters())
        self.encoder_opt = make_optimizer(enc_params, config.lr) if enc_params else None

        self.log_alpha = torch.nn.Parameter(torch.tensor(math.log(0.1)))
        # ParameterList wrapper so the temperature rides along in checkpoints.
        self._alpha_holder = torch.nn.ParameterList([self.log_alpha])
        self.alpha_opt = make_optimizer([self.log_alpha], config.lr)
        self.target_entropy = -float(ACTION_DIM)

    # -- features ------------------------------------------------------------

    @property
    def alpha(self) -> float:
        if self.config.entropy_mode == "off":
            return 0.0
        if self.config.entropy_mode == "fixed":
            return self.config.entropy_coef
        return float(self.log_alpha.detach().exp())

    def _features(self, payload: np.ndarray, proprio: np.ndarray, augmented: bool) -> torch.Tensor:
        pr = torch.from_numpy(proprio)
        if self.obs_mode == "pixel":
            img = images_to_tensor(payload)
            if augmented:
                img = augment(img, generator=self.torch_gen)
            return self.featurizer(img, pr)
        return self.featurizer(torch.from_numpy(payload), pr)

    def obs_features(self, obs: Observation) -> torch.Tensor:
        payload = obs.state_vec if self.obs_mode == "state" else obs.image[None]
        if self.obs_mode == "state":
            payload = payload[None]
        with torch.no_grad():
            return self._features(payload, obs.proprio[None], augmented=False)

    def act(self, obs: Observation, explore: bool = True) -> Action:
        with torch.no_grad():
            feat = self.obs_features(obs)
            if explore:
                a, _ = self.policy.sample(feat, generator=self.torch_gen)
            else:
                a = self.policy.mean_action(feat)
        return Action.from_vector(a[0].numpy())

    # -- updates ---------------------------------------------------------------

    def compute_td_targets(self, batch: TransitionBatch, rewards: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            next_feat = self._features(batch.next_obs, batch.next_obs_proprio, augmented=True)
            next_action, next_logp = self.policy.sample(next_feat, generator=self.torch_gen)
            target_vals = self.q_target(next_feat, next_action)
            return td_target(
                rewards,
                target_vals,
                self.config.gamma,
                self.config.target_subset,
                generator=self.torch_gen,
                log_prob=next_logp,
                alpha=self.alpha,
                per_sample=self.config.per_sample_subset,
            )

    def bellman_update(self, batch: TransitionBatch, rewards: torch.Tensor) -> dict:
        """One critic step: every head regresses onto the shared target. The
        featurizer trains through this loss and only this loss."""
        y = self.compute_td_targets(batch, rewards)
        feat = self._features(batch.obs, batch.obs_proprio, augmented=True)
        q_all = self.q(feat, torch.from_numpy(batch.action))
        loss = (q_all - y.unsqueeze(0)).pow(2).mean()
        if not torch.isfinite(loss):
            log.warning("non-finite Bellman loss; update skipped")
            return {"bellman_loss": float("nan"), "skipped": True, "grad_norm": float("nan")}
        opts = [self.q_opt] + ([self.encoder_opt] if self.encoder_opt else [])
        params = list(self.q.parameters()) + list(self.featurizer.parameters())
        norm, skipped = grad_step(loss, opts, params)
        return {"bellman_loss": float(loss.detach()), "skipped": skipped, "grad_norm": norm}

    def ema_update(self):
        ema_update(self.q, self.q_target, self.config.tau)

    def policy_update(self, batch: TransitionBatch, demo_batch: TransitionBatch, lambda_t: float) -> dict:
        """One actor step: maximize mean critic value with entropy bonus plus
        the expert log-likelihood, never touching critic or featurizer."""
        if lambda_t < 0:
            raise ValueError("lambda_t must be >= 0")
        with torch.no_grad():
            feat = self._features(batch.obs, batch.obs_proprio, augmented=True)
            demo_feat = self._features(demo_batch.obs, demo_batch.obs_proprio, augmented=True)
        action, logp = self.policy.sample(feat, generator=self.torch_gen)
        for p in self.q.parameters():
            p.requires_grad_(False)
        try:
            q_mean = self.q(feat, action).mean(dim=0)
            bc_ll = (
                self.policy.log_prob(demo_feat, torch.from_numpy(demo_batch.action)).mean()
                if lambda_t > 0.0
                else torch.zeros(())
            )
            alpha = self.alpha
            loss = (alpha * logp - q_mean).mean() - lambda_t * bc_ll
            if not torch.isfinite(loss):
                log.warning("non-finite policy loss; update skipped")
                return {"skipped": True}
            norm, skipped = grad_step(loss, [self.policy_opt], list(self.policy.parameters()))
        finally:
            for p in self.q.parameters():
                p.requires_grad_(True)
        entropy = float(-logp.detach().mean())
        if self.config.entropy_mode == "auto":
            alpha_loss = -(self.log_alpha * (logp.detach() + self.target_entropy)).mean()
            grad_step(alpha_loss, [self.alpha_opt], [self.log_alpha])
        return {
            "policy_q_term": float(q_mean.detach().mean()),
            "bc_term": float(bc_ll.detach()),
            "entropy": entropy,
            "alpha": self.alpha,
            "grad_norm": norm,
            "skipped": skipped,
        }

    def train_tick(
        self,
        replay: ReplayBuffer,
        demos: DemoSet,
        step: int,
        reward_fn,
        rng: np.random.Generator | None = None,
    ) -> LossReport:
        """One environment step's worth of learning: ``utd`` critic updates
        (each followed by an EMA step) and exactly one policy update."""
        cfg = self.config
        if len(replay) < cfg.warmup_steps:
            return LossReport()
        rng = rng if rng is not None else self.np_rng
        bellman_losses = []
        grad_norms: dict[str, float] = {}
        skipped = False
        for _ in range(cfg.utd):
            batch = compose_batch(replay, demos, cfg.batch_size, cfg.rho, rng)
            rewards = reward_fn(batch)
            out = self.bellman_update(batch, rewards)
            skipped |= out["skipped"]
            bellman_losses.append(out["bellman_loss"])
            grad_norms["critic"] = out["grad_norm"]
            self.ema_update()
        batch = compose_batch(replay, demos, cfg.batch_size, cfg.rho, rng)
        demo_batch = demos.sample_batch(cfg.batch_size, rng)
        lam = lambda_at(step, cfg.lambda_start, cfg.lambda_end, cfg.lambda_decay_steps)
        pout = self.policy_update(batch, demo_batch, lam)
        skipped |= pout.get("skipped", False)
        grad_norms["policy"] = pout.get("grad_norm", float("nan"))
        return LossReport(
            bellman_loss=float(np.mean(bellman_losses)),
            policy_q_term=pout.get("policy_q_term"),
            bc_term=pout.get("bc_term"),
            entropy=pout.get("entropy"),
            alpha=pout.get("alpha", self.alpha),
            grad_norms=grad_norms,
            n_bellman_updates=cfg.utd,
            n_policy_updates=1,
            skipped=skipped,
        )

    # -- persistence -----------------------------------------------------------

    def named_modules_for_checkpoint(self) -> dict[str, torch.nn.Module]:
        return {
            "featurizer": self.featurizer,
            "policy": self.policy,
            "q": self.q,
            "q_target": self.q_target,
            "alpha": self._alpha_holder,
        }

    def named_optimizers_for_checkpoint(self) -> dict[str, torch.optim.Optimizer]:
        opts = {"q": self.q_opt, "policy": self.policy_opt, "alpha": self.alpha_opt}
        if self.encoder_opt:
            opts["encoder"] = self.encoder_opt
        return opts
