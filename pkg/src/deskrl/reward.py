"""Learned reward machinery.

Each direction owns a :class:`Discriminator`: a spectral-norm-constrained
classifier trained to tell its goal set apart from states the system visits
online. The policy's reward is a clipped -log(1 - p) transform of the
classifier's probability, recomputed at batch-sampling time so stored
transitions always score under the latest classifier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import GoalSet, LabeledStateBatch, ReplayBuffer, TransitionBatch, classifier_batch
from .nets import ClassifierNet, augment, grad_step, images_to_tensor, make_optimizer

log = logging.getLogger(__name__)


@dataclass
class MixupConfig:
    alpha: float = 1.0  # Beta(alpha, alpha) mixing weight

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("mixup alpha must be > 0")


@dataclass
class RewardConfig:
    update_period: int = 1000  # environment steps between classifier updates
    steps_per_update: int = 1  # gradient steps per update event
    batch_size: int = 512
    r_max: float = 10.0
    mixup_alpha: float = 1.0
    form: str = "neg_log_one_minus"  # or "logit_difference"
    lr: float = 1e-4
    use_ground_truth: bool = False  # true-reward ablation: bypass the classifier

    def __post_init__(self):
        if self.form not in ("neg_log_one_minus", "logit_difference"):
            raise ValueError(f"unknown reward form {self.form!r}")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")


class Discriminator:
    """Classifier + goal set + update cadence for one direction."""

    def __init__(
        self,
        mode: str,
        input_spec: str,
        goal_set: GoalSet,
        config: RewardConfig,
        seed: int = 0,
        n_views: int = 1,
    ):
        self.config = config
        self.goal_set = goal_set
        self.input_spec = input_spec
        self.mode = mode
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.net = ClassifierNet(mode=mode, input_spec=input_spec, n_views=n_views)
        self.opt = make_optimizer(self.net.parameters(), config.lr)
        self.torch_gen = torch.Generator().manual_seed(seed)
        self.np_rng = np.random.default_rng(seed)

    # -- inputs ----------------------------------------------------------------

    def _inputs(self, states: np.ndarray, proprio: np.ndarray, augmented: bool):
        if self.mode == "pixel":
            payload = images_to_tensor(states)
            if augmented:
                payload = augment(payload, generator=self.torch_gen)
        else:
            payload = torch.from_numpy(states)
        pr = torch.from_numpy(proprio) if self.input_spec == "image_plus_proprio" else None
        return payload, pr

    def logits(self, states: np.ndarray, proprio: np.ndarray) -> torch.Tensor:
        """Inference-only query; eval mode keeps the spectral-norm power
        iteration (and therefore the output) fixed."""
        payload, pr = self._inputs(states, proprio, augmented=False)
        was_training = self.net.training
        self.net.eval()
        try:
            with torch.no_grad():
                return self.net(payload, pr)
        finally:
            self.net.train(was_training)

    # -- training ----------------------------------------------------------------

    def should_update(self, step: int) -> bool:
        """Update cadence: every ``update_period`` steps, never at step 0."""
        if step < 0:
            raise ValueError("step must be >= 0")
        return step > 0 and step % self.config.update_period == 0

    def update(self, batch: LabeledStateBatch) -> float:
        """One cross-entropy step on a mixup-interpolated balanced batch,
        re-enforcing the spectral-norm constraint afterwards."""
        payload, pr = self._inputs(batch.states, batch.proprio, augmented=True)
        labels = torch.from_numpy(batch.labels)
        payload = payload.float()

        lam = float(
            self.np_rng.beta(self.config.mixup_alpha, self.config.mixup_alpha)
        )
        perm = torch.from_numpy(self.np_rng.permutation(len(labels)))
        mixed = lam * payload + (1.0 - lam) * payload[perm]
        mixed_labels = lam * labels + (1.0 - lam) * labels[perm]
        if pr is not None:
            pr = lam * pr + (1.0 - lam) * pr[perm]

        logits = self.net(mixed, pr)
        loss = F.binary_cross_entropy_with_logits(logits, mixed_labels)
        if not torch.isfinite(loss):
            log.warning("non-finite classifier loss; update skipped")
            return float("nan")
        grad_step(loss, [self.opt], list(self.net.parameters()))
        self.net.tighten_constraint()
        return float(loss.detach())

    def train_event(self, online_source: ReplayBuffer) -> float:
        """One scheduled update event: ``steps_per_update`` gradient steps on
        fresh balanced batches."""
        last = float("nan")
        for _ in range(self.config.steps_per_update):
            batch = classifier_batch(
                self.goal_set, online_source, self.config.batch_size, self.np_rng
            )
            last = self.update(batch)
        return last


def learned_reward_from_logit(
    logit: torch.Tensor, r_max: float, form: str = "neg_log_one_minus"
) -> torch.Tensor:
    """Reward transform of the classifier confidence.

    ``neg_log_one_minus``: -log(1 - p), clipped to [0, r_max]. The clip
    engages exactly at p = 1 - exp(-r_max). ``logit_difference`` uses
    log p - log(1 - p) = logit, clipped symmetrically to [-r_max, r_max].
    """
    if form == "neg_log_one_minus":
        # -log(1 - sigmoid(x)) == softplus(x), computed stably.
        return F.softplus(logit).clamp(max=r_max)
    return logit.clamp(min=-r_max, max=r_max)


def learned_reward(disc: Discriminator, states: np.ndarray, proprio: np.ndarray) -> torch.Tensor:
    """Deterministic reward query (no augmentation) for a batch of states."""
    with torch.no_grad():
        logit = disc.logits(states, proprio)
        return learned_reward_from_logit(logit, disc.config.r_max, disc.config.form)


def reward_relabel(batch: TransitionBatch, disc: Discriminator) -> torch.Tensor:
    """Score a transition batch under the current classifier: the reward is
    evaluated at the state reached (next_obs); any stored ground-truth reward
    is ignored."""
    return learned_reward(disc, batch.next_obs, batch.next_obs_proprio)


def ground_truth_rewards(batch: TransitionBatch) -> torch.Tensor:
    """True-reward ablation path; requires the batch to carry gt_reward."""
    r = torch.from_numpy(batch.gt_reward)
    if not torch.isfinite(r).all():
        raise ValueError("batch contains transitions without ground-truth reward")
    return r
