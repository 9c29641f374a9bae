"""Demo-collection session driven entirely by teleop commands.

Each ``teleop_action`` steps the simulator exactly once and echoes the result
as a lockstep frame plus an ack. Trajectories are recorded between
``start_demo``/``end_demo`` and share the on-disk schema with scripted
demonstrations. ``intervene_reset`` redraws a wide-randomized initial state
(demo diversity); resetting mid-recording discards the partial trajectory.
"""

from __future__ import annotations

import logging
import queue

import numpy as np

from ..config import RunConfig
from ..data import DemoSet, Transition, save_demos
from ..env import Action, ArenaEnv
from ..orchestrator import NullPublisher, SessionCommand

log = logging.getLogger(__name__)


class DemoCollectionSession:
    mode = "demo"

    def __init__(self, config: RunConfig, publisher=None):
        self.config = config
        self.publisher = publisher or NullPublisher()
        self.env = ArenaEnv(
            task=config["env.task"], seed=config["run.seed"], obs_mode=config["env.obs_mode"]
        )
        self.mailbox: queue.Queue = queue.Queue()
        self.trajectories: dict[str, list[list[Transition]]] = {"forward": [], "backward": []}
        self._recording: str | None = None
        self._current: list[Transition] = []
        self._obs = self.env.reset("wide_randomized")
        self._stop = False

    # -- introspection -------------------------------------------------------

    def session_info(self) -> dict:
        return {
            "mode": self.mode,
            "step": self.env.tick,
            "recording": self._recording,
            "n_forward": len(self.trajectories["forward"]),
            "n_backward": len(self.trajectories["backward"]),
        }

    def request_stop(self):
        self._stop = True

    # -- the loop ----------------------------------------------------------------

    def run(self, until=None):
        """Consume commands until ``until()`` is true or a stop is requested."""
        while not self._stop:
            if until is not None and until(self):
                return
            try:
                cmd: SessionCommand = self.mailbox.get(timeout=0.1)
            except queue.Empty:
                continue
            self.apply(cmd)

    def apply(self, cmd: SessionCommand):
        handler = getattr(self, f"_cmd_{cmd.kind}", None)
        if handler is None:
            self.publisher.publish_session_info(
                {"event": "ignored", "command": cmd.kind}
            )
            return
        handler(cmd.args)

    # -- command handlers -----------------------------------------------------------

    def _cmd_start_demo(self, args: dict):
        direction = args.get("direction")
        if direction not in ("forward", "backward"):
            self.publisher.publish_session_info(
                {"event": "error", "reason": f"start_demo needs a direction, got {direction!r}"}
            )
            return
        if self._recording is not None:
            self.publisher.publish_session_info(
                {"event": "error", "reason": "already recording; end_demo first"}
            )
            return
        self._recording = direction
        self._current = []
        self.publisher.publish_session_info({"event": "demo_started", "direction": direction})

    def _cmd_teleop_action(self, args: dict):
        try:
            action = Action(
                delta_xy=np.asarray(args["delta_xy"], dtype=np.float64),
                gripper_cmd=float(args["gripper_cmd"]),
            )
            next_obs, reward, info = self.env.step(action)
        except (KeyError, TypeError, ValueError) as err:
            self.publisher.publish_session_info(
                {"event": "error", "reason": f"bad teleop action: {err}"}
            )
            return
        if self._recording is not None:
            self._current.append(
                Transition(self._obs, action, next_obs, gt_reward=reward)
            )
        self._obs = next_obs
        frame = {
            "step": self.env.tick,
            "mode": self.mode,
            "active": self._recording or "idle",
            "state": self.env.state,
            "reward": reward,
            "reset_count": info["reset_count"],
        }
        if hasattr(self.publisher, "publish_frame_now"):
            self.publisher.publish_frame_now(frame)
        else:
            self.publisher.publish_frame(frame)
        if hasattr(self.publisher, "publish_demo_ack"):
            self.publisher.publish_demo_ack(
                {"recorded_steps": len(self._current), "recording": self._recording}
            )

    def _cmd_end_demo(self, args: dict):
        discard = bool(args.get("discard"))
        if self._recording is None:
            if not discard:
                self.publisher.publish_session_info(
                    {"event": "error", "reason": "no demo in progress"}
                )
            return
        direction = self._recording
        traj, self._current, self._recording = self._current, [], None
        if discard or not traj:
            log.info("discarded partial %s demo (%d steps)", direction, len(traj))
            self.publisher.publish_session_info(
                {"event": "demo_discarded", "direction": direction, "steps": len(traj)}
            )
            return
        self.trajectories[direction].append(traj)
        self.publisher.publish_session_info(
            {"event": "demo_recorded", "direction": direction, "steps": len(traj)}
        )

    def _cmd_intervene_reset(self, args: dict):
        if self._recording is not None:
            self._cmd_end_demo({"discard": True})
        self._obs = self.env.reset("wide_randomized")
        self.publisher.publish_session_info({"event": "reset", "cause": "intervention"})

    def _cmd_pause(self, args: dict):
        self.publisher.publish_session_info({"event": "paused"})

    def _cmd_resume(self, args: dict):
        self.publisher.publish_session_info({"event": "resumed"})

    # -- persistence ------------------------------------------------------------------

    def demo_sets(self) -> tuple[DemoSet, DemoSet]:
        return (
            DemoSet(self.trajectories["forward"], "forward"),
            DemoSet(self.trajectories["backward"], "backward"),
        )

    def save(self, forward_path, backward_path):
        fwd, bwd = self.demo_sets()
        save_demos(fwd, forward_path)
        save_demos(bwd, backward_path)
        return fwd, bwd
