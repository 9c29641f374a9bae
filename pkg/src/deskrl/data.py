"""Replay storage, demonstration stores, goal sets, and batch composition.

Demonstrations are kept separate from the replay buffer: the policy's
behaviour-cloning term and the batch oversampling both draw from the expert
store directly, while the replay buffer only ever holds transitions the
system collected itself.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import ACTION_DIM, IMAGE_SIZE, PROPRIO_DIM, STATE_DIM, Action, Observation

log = logging.getLogger(__name__)

DEMO_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Transition:
    """One environment step. Done-free: the arena is non-episodic."""

    obs: Observation
    action: Action
    next_obs: Observation
    gt_reward: float | None = None  # evaluation / true-reward ablation only

    def __post_init__(self):
        if self.obs.mode != self.next_obs.mode:
            raise ValueError("obs and next_obs must share the observation mode")


@dataclass
class TransitionBatch:
    """Columnar view of a set of transitions, ready for tensor conversion.

    ``obs`` / ``next_obs`` hold state vectors (B, STATE_DIM) in state mode or
    uint8 images (B, H, W, 3) in pixel mode.
    """

    mode: str
    obs: np.ndarray
    obs_proprio: np.ndarray
    action: np.ndarray
    next_obs: np.ndarray
    next_obs_proprio: np.ndarray
    gt_reward: np.ndarray  # NaN where the ground-truth reward was absent
    is_demo: np.ndarray  # bool, True for oversampled expert transitions

    def __len__(self) -> int:
        return self.obs.shape[0]


def _obs_payload(obs: Observation) -> np.ndarray:
    return obs.state_vec if obs.mode == "state" else obs.image


class ReplayBuffer:
    """FIFO ring buffer with uniform sampling.

    Arrays are allocated lazily from the first inserted transition so one
    buffer class serves both observation modes. Single-writer; callers
    serialize insert/sample.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self._mode: str | None = None
        self._storage: dict[str, np.ndarray] | None = None

    def _allocate(self, t: Transition):
        self._mode = t.obs.mode
        payload = _obs_payload(t.obs)
        obs_shape = (self.capacity, *payload.shape)
        self._storage = {
            "obs": np.zeros(obs_shape, dtype=payload.dtype),
            "next_obs": np.zeros(obs_shape, dtype=payload.dtype),
            "obs_proprio": np.zeros((self.capacity, PROPRIO_DIM), dtype=np.float32),
            "next_obs_proprio": np.zeros((self.capacity, PROPRIO_DIM), dtype=np.float32),
            "action": np.zeros((self.capacity, ACTION_DIM), dtype=np.float32),
            "gt_reward": np.full((self.capacity,), np.nan, dtype=np.float32),
        }

    def insert(self, t: Transition):
        if self._storage is None:
            self._allocate(t)
        elif t.obs.mode != self._mode:
            raise ValueError(f"buffer holds {self._mode!r} transitions, got {t.obs.mode!r}")
        i = self._next
        s = self._storage
        s["obs"][i] = _obs_payload(t.obs)
        s["next_obs"][i] = _obs_payload(t.next_obs)
        s["obs_proprio"][i] = t.obs.proprio
        s["next_obs_proprio"][i] = t.next_obs.proprio
        s["action"][i] = t.action.to_vector()
        s["gt_reward"][i] = np.nan if t.gt_reward is None else t.gt_reward
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def gather(self, idx: np.ndarray, is_demo: bool = False) -> TransitionBatch:
        s = self._storage
        return TransitionBatch(
            mode=self._mode,
            obs=s["obs"][idx].copy(),
            obs_proprio=s["obs_proprio"][idx].copy(),
            action=s["action"][idx].copy(),
            next_obs=s["next_obs"][idx].copy(),
            next_obs_proprio=s["next_obs_proprio"][idx].copy(),
            gt_reward=s["gt_reward"][idx].copy(),
            is_demo=np.full(len(idx), is_demo),
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.gather(idx)

    def stored_order(self) -> np.ndarray:
        """Indices of live entries in insertion order (oldest first)."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self._next) % self.capacity


class DemoSet:
    """Immutable set of expert trajectories for one direction."""

    def __init__(self, trajectories: list[list[Transition]], direction: str):
        if direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward/backward, got {direction!r}")
        if any(len(traj) == 0 for traj in trajectories):
            raise ValueError("empty trajectory in demo set")
        self.direction = direction
        self.trajectories: tuple[tuple[Transition, ...], ...] = tuple(
            tuple(traj) for traj in trajectories
        )
        self._flat: tuple[Transition, ...] = tuple(
            t for traj in self.trajectories for t in traj
        )

    @property
    def transitions(self) -> tuple[Transition, ...]:
        """All transitions pooled across trajectories."""
        return self._flat

    def __len__(self) -> int:
        return len(self.trajectories)

    def as_batch(self, idx: np.ndarray) -> TransitionBatch:
        ts = [self._flat[i] for i in idx]
        mode = ts[0].obs.mode
        return TransitionBatch(
            mode=mode,
            obs=np.stack([_obs_payload(t.obs) for t in ts]),
            obs_proprio=np.stack([t.obs.proprio for t in ts]),
            action=np.stack([t.action.to_vector() for t in ts]),
            next_obs=np.stack([_obs_payload(t.next_obs) for t in ts]),
            next_obs_proprio=np.stack([t.next_obs.proprio for t in ts]),
            gt_reward=np.array(
                [np.nan if t.gt_reward is None else t.gt_reward for t in ts],
                dtype=np.float32,
            ),
            is_demo=np.ones(len(ts), dtype=bool),
        )

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        idx = rng.integers(0, len(self._flat), size=batch_size)
        return self.as_batch(idx)


@dataclass
class GoalSet:
    """Positive-label states for one discriminator."""

    states: list[Observation]
    role: str  # forward_positive | backward_positive

    def __post_init__(self):
        if not self.states:
            raise ValueError("goal set must be nonempty")
        if self.role not in ("forward_positive", "backward_positive"):
            raise ValueError(f"unknown goal-set role {self.role!r}")

    def __len__(self) -> int:
        return len(self.states)

    def sample(self, n: int, rng: np.random.Generator) -> list[Observation]:
        idx = rng.integers(0, len(self.states), size=n)
        return [self.states[i] for i in idx]


def trajectory_states(traj: tuple[Transition, ...] | list[Transition]) -> list[Observation]:
    """The visited-state sequence of a trajectory: each step's next_obs."""
    return [t.next_obs for t in traj]


def build_goal_sets(demos_f: DemoSet, demos_b: DemoSet, last_k: int) -> tuple[GoalSet, GoalSet]:
    """Split demonstrations into the two discriminators' positive sets.

    The forward set takes the last ``last_k`` states of every forward
    trajectory. The backward set takes everything the forward set did not,
    plus the last ``last_k`` states of every backward trajectory.
    """
    if last_k < 1:
        raise ValueError("last_k must be >= 1")
    for demos in (demos_f, demos_b):
        for i, traj in enumerate(demos.trajectories):
            if len(traj) < last_k:
                raise ValueError(
                    f"{demos.direction} trajectory {i} has {len(traj)} steps, "
                    f"shorter than last_k={last_k}"
                )
    forward_states: list[Observation] = []
    backward_states: list[Observation] = []
    for traj in demos_f.trajectories:
        states = trajectory_states(traj)
        forward_states.extend(states[-last_k:])
        backward_states.extend(states[:-last_k])
    for traj in demos_b.trajectories:
        backward_states.extend(trajectory_states(traj)[-last_k:])
    return (
        GoalSet(states=forward_states, role="forward_positive"),
        GoalSet(states=backward_states, role="backward_positive"),
    )


def _concat_batches(a: TransitionBatch, b: TransitionBatch) -> TransitionBatch:
    return TransitionBatch(
        mode=a.mode,
        obs=np.concatenate([a.obs, b.obs]),
        obs_proprio=np.concatenate([a.obs_proprio, b.obs_proprio]),
        action=np.concatenate([a.action, b.action]),
        next_obs=np.concatenate([a.next_obs, b.next_obs]),
        next_obs_proprio=np.concatenate([a.next_obs_proprio, b.next_obs_proprio]),
        gt_reward=np.concatenate([a.gt_reward, b.gt_reward]),
        is_demo=np.concatenate([a.is_demo, b.is_demo]),
    )


def _permute_batch(batch: TransitionBatch, perm: np.ndarray) -> TransitionBatch:
    return TransitionBatch(
        mode=batch.mode,
        obs=batch.obs[perm],
        obs_proprio=batch.obs_proprio[perm],
        action=batch.action[perm],
        next_obs=batch.next_obs[perm],
        next_obs_proprio=batch.next_obs_proprio[perm],
        gt_reward=batch.gt_reward[perm],
        is_demo=batch.is_demo[perm],
    )


def compose_batch(
    replay: ReplayBuffer,
    demos: DemoSet,
    batch_size: int,
    rho: float,
    rng: np.random.Generator,
) -> TransitionBatch:
    """Mix expert and replay transitions: exactly round(rho * B) come from
    the demonstrations, the rest uniformly from replay, shuffled together.

    An empty replay buffer (early training) falls back to an all-demo batch.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must be in [0, 1)")
    n_demo = int(np.rint(rho * batch_size))
    if len(replay) == 0:
        log.warning("replay buffer empty; composing an all-demo batch")
        n_demo = batch_size
    demo_part = demos.sample_batch(n_demo, rng) if n_demo > 0 else None
    n_replay = batch_size - n_demo
    replay_part = replay.sample(n_replay, rng) if n_replay > 0 else None
    if demo_part is None:
        batch = replay_part
    elif replay_part is None:
        batch = demo_part
    else:
        batch = _concat_batches(demo_part, replay_part)
    return _permute_batch(batch, rng.permutation(batch_size))


@dataclass
class LabeledStateBatch:
    """Balanced classifier batch: goal-set positives vs online negatives."""

    mode: str
    states: np.ndarray  # (B, STATE_DIM) or (B, H, W, 3)
    proprio: np.ndarray  # (B, PROPRIO_DIM)
    labels: np.ndarray  # float32, 1.0 positives / 0.0 negatives


def classifier_batch(
    goal_set: GoalSet,
    online_source: ReplayBuffer,
    batch_size: int,
    rng: np.random.Generator,
) -> LabeledStateBatch:
    """Half positives sampled (with replacement) from the goal set, half
    negatives from states the system visited online."""
    if batch_size % 2 != 0:
        raise ValueError("classifier batch size must be even")
    if len(goal_set) == 0 or len(online_source) == 0:
        raise ValueError("both classifier sources must be nonempty")
    half = batch_size // 2
    positives = goal_set.sample(half, rng)
    pos_states = np.stack([_obs_payload(o) for o in positives])
    pos_proprio = np.stack([o.proprio for o in positives])
    negatives = online_source.sample(half, rng)
    states = np.concatenate([pos_states, negatives.next_obs])
    proprio = np.concatenate([pos_proprio, negatives.next_obs_proprio])
    labels = np.concatenate([np.ones(half), np.zeros(half)]).astype(np.float32)
    perm = rng.permutation(batch_size)
    return LabeledStateBatch(
        mode=positives[0].mode,
        states=states[perm],
        proprio=proprio[perm],
        labels=labels[perm],
    )


# -- demo file round-trip ------------------------------------------------------
#
# Line-delimited JSON: one header record per trajectory followed by one record
# per step. Images travel base64-encoded; numeric vectors as plain lists.


def _encode_obs(obs: Observation) -> dict:
    rec: dict = {"mode": obs.mode, "proprio": [float(x) for x in obs.proprio]}
    if obs.mode == "state":
        rec["state_vec"] = [float(x) for x in obs.state_vec]
    else:
        rec["image_b64"] = base64.b64encode(obs.image.tobytes()).decode("ascii")
        rec["image_shape"] = list(obs.image.shape)
    return rec


def _decode_obs(rec: dict) -> Observation:
    for key in ("mode", "proprio"):
        if key not in rec:
            raise ValueError(f"observation record missing field {key!r}")
    mode = rec["mode"]
    proprio = np.array(rec["proprio"], dtype=np.float32)
    if mode == "state":
        if "state_vec" not in rec:
            raise ValueError("state-mode observation record missing field 'state_vec'")
        return Observation(mode=mode, proprio=proprio, state_vec=np.array(rec["state_vec"], dtype=np.float32))
    shape = tuple(rec["image_shape"])
    image = np.frombuffer(base64.b64decode(rec["image_b64"]), dtype=np.uint8).reshape(shape)
    return Observation(mode=mode, proprio=proprio, image=image.copy())


def save_demos(demos: DemoSet, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for i, traj in enumerate(demos.trajectories):
            header = {
                "record": "trajectory",
                "id": i,
                "direction": demos.direction,
                "length": len(traj),
                "schema_version": DEMO_SCHEMA_VERSION,
            }
            f.write(json.dumps(header) + "\n")
            for t in traj:
                step = {
                    "record": "step",
                    "obs": _encode_obs(t.obs),
                    # Serialized at full float64 precision so the round trip
                    # is bit-exact.
                    "action": [
                        float(t.action.delta_xy[0]),
                        float(t.action.delta_xy[1]),
                        float(t.action.gripper_cmd),
                    ],
                    "next_obs": _encode_obs(t.next_obs),
                    "gt_reward": None if t.gt_reward is None else float(t.gt_reward),
                }
                f.write(json.dumps(step) + "\n")


def load_demos(path: str | Path) -> DemoSet:
    path = Path(path)
    trajectories: list[list[Transition]] = []
    direction: str | None = None
    expected = 0
    with path.open() as f:
        for line_no, line in enumerate(f, start=1):
            rec = json.loads(line)
            kind = rec.get("record")
            if kind == "trajectory":
                version = rec.get("schema_version")
                if version != DEMO_SCHEMA_VERSION:
                    raise ValueError(
                        f"demo schema version mismatch: file has {version}, "
                        f"this build reads {DEMO_SCHEMA_VERSION}"
                    )
                if expected != 0:
                    raise ValueError(f"line {line_no}: previous trajectory truncated")
                direction = rec["direction"]
                expected = rec["length"]
                trajectories.append([])
            elif kind == "step":
                if not trajectories or expected == 0:
                    raise ValueError(f"line {line_no}: step record outside a trajectory")
                for key in ("obs", "action", "next_obs"):
                    if key not in rec:
                        raise ValueError(f"line {line_no}: step record missing field {key!r}")
                avec = rec["action"]
                trajectories[-1].append(
                    Transition(
                        obs=_decode_obs(rec["obs"]),
                        action=Action(
                            delta_xy=np.array(avec[:2], dtype=np.float64),
                            gripper_cmd=float(avec[2]),
                        ),
                        next_obs=_decode_obs(rec["next_obs"]),
                        gt_reward=rec.get("gt_reward"),
                    )
                )
                expected -= 1
            else:
                raise ValueError(f"line {line_no}: unknown record kind {kind!r}")
    if expected != 0:
        raise ValueError("file ended mid-trajectory")
    if direction is None:
        raise ValueError(f"no trajectories found in {path}")
    return DemoSet(trajectories=trajectories, direction=direction)
