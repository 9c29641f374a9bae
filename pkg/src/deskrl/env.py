"""Non-episodic 2D pick-and-place arena.

A point effector moves in the unit square, grasps a single object and carries
it to a fixed goal region. The simulator never resets itself: between explicit
``reset()`` calls the state evolves only through ``step()``, which is what the
training loop relies on. A sparse ground-truth reward (object within a
tolerance of the goal) is computed every step but only consumed by evaluation
and the true-reward ablation; the learning system infers its own rewards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Arena mechanics. Positions live in [-1, 1]^2; one tick moves the effector
# by at most EFFECTOR_SPEED and the gripper aperture by at most GRIPPER_RATE.
EFFECTOR_SPEED = 0.05
GRIPPER_RATE = 0.25
GRASP_RADIUS = 0.1
GOAL_TOLERANCE = 0.1

IMAGE_SIZE = 84
STATE_DIM = 8
PROPRIO_DIM = 3
ACTION_DIM = 3

# Initial-state distribution (rho0): a corner region, used for evaluation and
# scheduled resets. The wide distribution spans almost the whole arena and is
# used only when collecting demonstrations.
RHO0_OBJECT_LOW, RHO0_OBJECT_HIGH = (-0.6, -0.6), (-0.2, -0.2)
RHO0_EFFECTOR_LOW, RHO0_EFFECTOR_HIGH = (-0.8, -0.8), (-0.4, -0.4)
WIDE_LOW, WIDE_HIGH = (-0.85, -0.85), (0.85, 0.85)

# Where the backward controller returns the object to: the centre of the
# rho0 object box.
HOME_XY = (-0.4, -0.4)
HOME_TOLERANCE = 0.08

TASKS = {
    "pickplace": {"goal_xy": (0.6, 0.6)},
    "pickplace_near": {"goal_xy": (0.2, 0.4)},
}


@dataclass(frozen=True)
class EnvState:
    """Full simulator state. Immutable; ``step`` returns a new one."""

    effector_xy: np.ndarray  # float64 (2,), in [-1, 1]^2
    gripper: float  # aperture in [0, 1]; 0 open, 1 closed
    object_xy: np.ndarray  # float64 (2,), in [-1, 1]^2
    held: bool
    goal_xy: np.ndarray  # float64 (2,), fixed per task variant

    def to_vector(self) -> np.ndarray:
        """Flat float32 vector: effector, gripper, object, held, goal."""
        return np.concatenate(
            [
                self.effector_xy,
                [self.gripper],
                self.object_xy,
                [1.0 if self.held else 0.0],
                self.goal_xy,
            ]
        ).astype(np.float32)

    def proprio(self) -> np.ndarray:
        return np.concatenate([self.effector_xy, [self.gripper]]).astype(np.float32)


@dataclass(frozen=True)
class Observation:
    """What the agent sees. ``proprio`` is always present; exactly one of
    ``state_vec`` / ``image`` is populated depending on the mode."""

    mode: str  # "state" or "pixel"
    proprio: np.ndarray  # float32 (3,)
    state_vec: np.ndarray | None = None  # float32 (STATE_DIM,)
    image: np.ndarray | None = None  # uint8 (84, 84, 3)


@dataclass(frozen=True)
class Action:
    delta_xy: np.ndarray  # (2,) in [-1, 1], effector velocity command
    gripper_cmd: float  # in [-1, 1]; > 0 closes, < 0 opens

    @staticmethod
    def from_vector(vec: np.ndarray) -> "Action":
        vec = np.asarray(vec, dtype=np.float64).reshape(ACTION_DIM)
        return Action(delta_xy=vec[:2].copy(), gripper_cmd=float(vec[2]))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.delta_xy, [self.gripper_cmd]]).astype(np.float32)


class ArenaEnv:
    """Single-owner, seeded, non-episodic simulator.

    ``step`` never resets; ``reset_count`` increments only on explicit
    ``reset`` calls, which the orchestrator drives from its schedule or from
    human interventions.
    """

    def __init__(self, task: str = "pickplace", seed: int = 0, obs_mode: str = "state"):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
        if obs_mode not in ("state", "pixel"):
            raise ValueError(f"obs_mode must be 'state' or 'pixel', got {obs_mode!r}")
        self.task = task
        self.obs_mode = obs_mode
        self._rng = np.random.default_rng(seed)
        self._goal = np.asarray(TASKS[task]["goal_xy"], dtype=np.float64)
        self.reset_count = 0
        self.tick = 0
        self.state = self._sample_state("initial_distribution")

    # -- state sampling -----------------------------------------------------

    def _sample_state(self, seed_mode: str) -> EnvState:
        if seed_mode == "initial_distribution":
            obj = self._rng.uniform(RHO0_OBJECT_LOW, RHO0_OBJECT_HIGH)
            eff = self._rng.uniform(RHO0_EFFECTOR_LOW, RHO0_EFFECTOR_HIGH)
        elif seed_mode == "wide_randomized":
            obj = self._rng.uniform(WIDE_LOW, WIDE_HIGH)
            eff = self._rng.uniform(WIDE_LOW, WIDE_HIGH)
        else:
            raise ValueError(f"unknown seed_mode {seed_mode!r}")
        return EnvState(
            effector_xy=eff,
            gripper=0.0,
            object_xy=obj,
            held=False,
            goal_xy=self._goal.copy(),
        )

    def reset(self, seed_mode: str = "initial_distribution") -> Observation:
        """Sample a fresh state. Only entry point that teleports the arena."""
        self.state = self._sample_state(seed_mode)
        self.reset_count += 1
        return self.observe()

    # -- dynamics -----------------------------------------------------------

    def step(self, action: Action) -> tuple[Observation, float, dict]:
        delta = np.asarray(action.delta_xy, dtype=np.float64).reshape(2)
        cmd = float(action.gripper_cmd)
        if not (np.all(np.isfinite(delta)) and np.isfinite(cmd)):
            raise ValueError("action components must be finite")
        delta = np.clip(delta, -1.0, 1.0)
        cmd = float(np.clip(cmd, -1.0, 1.0))

        s = self.state
        eff = np.clip(s.effector_xy + EFFECTOR_SPEED * delta, -1.0, 1.0)
        was_open = s.gripper < 0.5
        gripper = float(np.clip(s.gripper + GRIPPER_RATE * cmd, 0.0, 1.0))

        held = s.held
        obj = s.object_xy.copy()
        if held and cmd < 0.0:
            # Release: the object stays where it was dropped.
            held = False
        if (
            not held
            and cmd > 0.0
            and was_open
            and np.linalg.norm(eff - obj) <= GRASP_RADIUS
        ):
            # Closing on the object only works if the gripper was still open
            # when the grasp began; arriving with a closed gripper requires
            # re-opening first.
            held = True
        if held:
            obj = eff.copy()

        self.state = EnvState(
            effector_xy=eff, gripper=gripper, object_xy=obj, held=held, goal_xy=s.goal_xy
        )
        self.tick += 1
        reward = self.ground_truth_reward(self.state)
        info = {
            "tick": self.tick,
            "reset_count": self.reset_count,
            "held": held,
            "success": bool(reward > 0.5),
        }
        return self.observe(), reward, info

    @staticmethod
    def ground_truth_reward(state: EnvState) -> float:
        """Sparse reward: 1 iff the object sits within tolerance of the goal."""
        dist = float(np.linalg.norm(state.object_xy - state.goal_xy))
        return 1.0 if dist <= GOAL_TOLERANCE else 0.0

    # -- observation --------------------------------------------------------

    def observe(self) -> Observation:
        s = self.state
        if self.obs_mode == "state":
            return Observation(mode="state", proprio=s.proprio(), state_vec=s.to_vector())
        return Observation(mode="pixel", proprio=s.proprio(), image=render(s))


# -- rendering ---------------------------------------------------------------

_BACKGROUND = np.array([24, 24, 28], dtype=np.uint8)
_GOAL_COLOR = np.array([40, 200, 80], dtype=np.uint8)
_OBJECT_COLOR = np.array([220, 60, 50], dtype=np.uint8)
_EFFECTOR_COLOR = np.array([70, 120, 240], dtype=np.uint8)

_YY, _XX = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")


def _to_pixel(xy: np.ndarray) -> tuple[float, float]:
    # x maps to columns, y to rows with y up.
    col = (xy[0] + 1.0) / 2.0 * (IMAGE_SIZE - 1)
    row = (1.0 - (xy[1] + 1.0) / 2.0) * (IMAGE_SIZE - 1)
    return row, col


def _disk(row: float, col: float, radius: float) -> np.ndarray:
    return (_YY - row) ** 2 + (_XX - col) ** 2 <= radius**2


def _ring(row: float, col: float, radius: float, width: float) -> np.ndarray:
    d2 = (_YY - row) ** 2 + (_XX - col) ** 2
    return (d2 <= radius**2) & (d2 >= (radius - width) ** 2)


def render(state: EnvState, size: int = IMAGE_SIZE) -> np.ndarray:
    """Deterministic top-down rendering of the arena.

    The goal is a green ring sized to the reward tolerance, the object a red
    disk, and the effector a blue ring whose centre dot brightens as the
    gripper closes. The effector is hollow so the object stays visible while
    held.
    """
    img = np.empty((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    img[:] = _BACKGROUND

    scale = (IMAGE_SIZE - 1) / 2.0
    grow, gcol = _to_pixel(state.goal_xy)
    img[_ring(grow, gcol, GOAL_TOLERANCE * scale, 1.8)] = _GOAL_COLOR

    orow, ocol = _to_pixel(state.object_xy)
    img[_disk(orow, ocol, 3.2)] = _OBJECT_COLOR

    erow, ecol = _to_pixel(state.effector_xy)
    img[_ring(erow, ecol, 5.5, 2.0)] = _EFFECTOR_COLOR
    dot = np.clip(np.array([70, 120, 240]) + state.gripper * np.array([150, 120, 0]), 0, 255)
    img[_disk(erow, ecol, 1.6)] = dot.astype(np.uint8)

    if size != IMAGE_SIZE:
        # Nearest-neighbour upscale for display-only renders.
        idx = (np.arange(size) * IMAGE_SIZE // size).clip(0, IMAGE_SIZE - 1)
        img = img[idx][:, idx]
    return img


# -- scripted expert ----------------------------------------------------------

_APPROACH_TOLERANCE = 0.05  # close the gripper once this near the object


def _move_toward(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Velocity command that covers at most the remaining distance."""
    gap = dst - src
    return np.clip(gap / EFFECTOR_SPEED, -1.0, 1.0)


def _fetch_action(state: EnvState, target: np.ndarray, tolerance: float) -> Action:
    """Shared grasp-and-carry controller: bring the object to ``target``."""
    eff, obj = state.effector_xy, state.object_xy
    if state.held:
        if np.linalg.norm(obj - target) <= tolerance:
            return Action(delta_xy=np.zeros(2), gripper_cmd=-1.0)  # release
        return Action(delta_xy=_move_toward(eff, target), gripper_cmd=1.0)
    if state.gripper >= 0.5:
        # Fumbled: arrived closed. Re-open before trying again.
        return Action(delta_xy=np.zeros(2), gripper_cmd=-1.0)
    if np.linalg.norm(eff - obj) > _APPROACH_TOLERANCE:
        return Action(delta_xy=_move_toward(eff, obj), gripper_cmd=-1.0)
    return Action(delta_xy=_move_toward(eff, obj), gripper_cmd=1.0)


def scripted_expert(state: EnvState, direction: str) -> Action:
    """Deterministic proportional controller standing in for a teleoperator.

    ``forward`` carries the object to the goal and releases; ``backward``
    returns it to the home patch inside the initial-state support.
    """
    if direction == "forward":
        target, tol = state.goal_xy, GOAL_TOLERANCE * 0.5
    elif direction == "backward":
        target, tol = np.asarray(HOME_XY, dtype=np.float64), HOME_TOLERANCE
    else:
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")

    if not state.held and np.linalg.norm(state.object_xy - target) <= tol:
        # Task complete: settle with an open gripper.
        return Action(delta_xy=np.zeros(2), gripper_cmd=-1.0)
    return _fetch_action(state, target, tol)


def expert_done(state: EnvState, direction: str) -> bool:
    """True once the scripted controller has nothing left to do."""
    target = state.goal_xy if direction == "forward" else np.asarray(HOME_XY)
    tol = GOAL_TOLERANCE * 0.5 if direction == "forward" else HOME_TOLERANCE
    return (
        not state.held
        and state.gripper < 0.5
        and float(np.linalg.norm(state.object_xy - target)) <= tol
    )


def in_rho0_object_support(xy: np.ndarray, margin: float = 1e-9) -> bool:
    lo, hi = np.asarray(RHO0_OBJECT_LOW), np.asarray(RHO0_OBJECT_HIGH)
    return bool(np.all(xy >= lo - margin) and np.all(xy <= hi + margin))
