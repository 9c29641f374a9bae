"""End-to-end training control.

The session alternates control between a *doing* (forward) and an *undoing*
(backward) policy, inserts transitions into per-direction buffers, trains the
active side's classifier and agent every step, and applies resets only from
its schedule or from injected intervention commands. Every reset hands
control back to the forward policy.
"""

from __future__ import annotations

import logging
import queue
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .agent import Agent, AgentConfig, LossReport
from .checkpoints import CheckpointManager
from .config import RunConfig
from .data import DemoSet, ReplayBuffer, Transition, build_goal_sets, load_demos
from .env import Action, ArenaEnv, expert_done, scripted_expert
from .metrics import MetricsWriter, write_manifest
from .reward import Discriminator, RewardConfig, ground_truth_rewards, reward_relabel

log = logging.getLogger(__name__)

VARIANTS = {
    "medalpp": {},
    "medal_vision": {
        # The pre-improvement system: twin critics, no BC term, no oversampling.
        "agent.n_critics": 2,
        "agent.target_subset": 2,
        "agent.lambda_start": 0.0,
        "agent.lambda_end": 0.0,
        "agent.rho": 0.0,
    },
    "ablation_true_reward": {"reward.use_ground_truth": True},
    "ablation_no_ensemble": {"agent.n_critics": 2, "agent.target_subset": 2},
    "ablation_no_bc_oversample": {
        "agent.lambda_start": 0.0,
        "agent.lambda_end": 0.0,
        "agent.rho": 0.0,
    },
    "naive_rl": {"orchestrator.forward_only": True, "orchestrator.reset_period": 25_000},
    "oracle_rl": {"orchestrator.forward_only": True, "orchestrator.reset_period": 200},
}


def make_variant(base: RunConfig, name: str) -> RunConfig:
    """Apply a named variant's config deltas on top of a base config."""
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; valid: {', '.join(sorted(VARIANTS))}")
    overrides = dict(VARIANTS[name])
    overrides["run.variant"] = name
    return base.with_overrides(overrides)


@dataclass
class SessionCommand:
    kind: str  # intervene_reset | pause | resume | start_demo | end_demo | teleop_action
    args: dict = field(default_factory=dict)

    VALID = ("intervene_reset", "pause", "resume", "start_demo", "end_demo", "teleop_action")

    def __post_init__(self):
        if self.kind not in self.VALID:
            raise ValueError(f"unknown command kind {self.kind!r}")


@dataclass
class SessionState:
    active: str = "forward"
    step_global: int = 0
    steps_since_switch: int = 0
    steps_since_reset: int = 0
    paused: bool = False


class NullPublisher:
    """Publisher interface stub; the bridge provides a real one."""

    def publish_frame(self, frame: dict):
        pass

    def publish_metrics(self, row: dict):
        pass

    def publish_session_info(self, info: dict):
        pass


def reset_due(
    steps_since_reset: int,
    step_global: int,
    reset_period: int,
    initial_reset_every: int,
    initial_reset_until: int,
) -> bool:
    """Scheduled-reset predicate, checked at each post-step boundary.

    Early in training a shorter cadence seeds diversity; afterwards resets
    come only every ``reset_period`` steps (0 disables them entirely).
    """
    if initial_reset_every > 0 and step_global <= initial_reset_until:
        return steps_since_reset >= initial_reset_every
    return reset_period > 0 and steps_since_reset >= reset_period


@dataclass
class AgentSide:
    name: str
    agent: Agent
    replay: ReplayBuffer
    demos: DemoSet
    disc: Discriminator

    def reward_fn(self, use_ground_truth: bool):
        if use_ground_truth:
            return ground_truth_rewards
        return lambda batch: reward_relabel(batch, self.disc)


def agent_config_from(cfg: RunConfig) -> AgentConfig:
    return AgentConfig(
        n_critics=cfg["agent.n_critics"],
        target_subset=cfg["agent.target_subset"],
        gamma=cfg["agent.gamma"],
        tau=cfg["agent.tau"],
        rho=cfg["agent.rho"],
        batch_size=cfg["agent.batch_size"],
        utd=cfg["agent.utd"],
        lambda_start=cfg["agent.lambda_start"],
        lambda_end=cfg["agent.lambda_end"],
        lambda_decay_steps=cfg["agent.lambda_decay_steps"],
        entropy_mode=cfg["agent.entropy_mode"],
        entropy_coef=cfg["agent.entropy_coef"],
        warmup_steps=cfg["agent.warmup_steps"],
        lr=cfg["approx.lr"],
        hidden_dim=cfg["approx.hidden_dim"],
        n_layers=cfg["approx.n_layers"],
        per_sample_subset=cfg["agent.per_sample_subset"],
    )


def reward_config_from(cfg: RunConfig) -> RewardConfig:
    return RewardConfig(
        update_period=cfg["reward.update_period"],
        steps_per_update=cfg["reward.steps_per_update"],
        batch_size=cfg["reward.batch_size"],
        r_max=cfg["reward.r_max"],
        mixup_alpha=cfg["reward.mixup_alpha"],
        form=cfg["reward.form"],
        lr=cfg["reward.lr"],
        use_ground_truth=cfg["reward.use_ground_truth"],
    )


class TrainingSession:
    """One autonomous training run, owned by a single thread.

    Commands arrive through ``mailbox`` and are applied only at step
    boundaries; frames and metrics flow out through ``publisher``.
    """

    mode = "training"

    def __init__(
        self,
        config: RunConfig,
        demos_f: DemoSet,
        demos_b: DemoSet,
        publisher=None,
        mailbox: queue.Queue | None = None,
        run_dir=None,
    ):
        self.config = config
        self.publisher = publisher or NullPublisher()
        self.mailbox = mailbox if mailbox is not None else queue.Queue()
        self.state = SessionState()
        seed = config["run.seed"]
        obs_mode = config["env.obs_mode"]

        self.env = ArenaEnv(task=config["env.task"], seed=seed, obs_mode=obs_mode)
        self.eval_env = ArenaEnv(task=config["env.task"], seed=seed + 100_000, obs_mode=obs_mode)
        self.np_rng = np.random.default_rng(seed + 1)

        agent_cfg = agent_config_from(config)
        reward_cfg = reward_config_from(config)
        n_views = config["approx.n_views"]
        goal_f, goal_b = build_goal_sets(demos_f, demos_b, config["data.last_k"])

        f_agent = Agent(obs_mode, agent_cfg, seed=seed + 10, n_views=n_views)
        b_agent = Agent(obs_mode, agent_cfg, seed=seed + 20, n_views=n_views)
        if config["orchestrator.share_encoder"]:
            b_agent.featurizer = f_agent.featurizer
            b_agent.encoder_opt = f_agent.encoder_opt
        self.forward = AgentSide(
            name="forward",
            agent=f_agent,
            replay=ReplayBuffer(config["data.replay_capacity"]),
            demos=demos_f,
            disc=Discriminator(obs_mode, "image_only", goal_f, reward_cfg, seed=seed + 30, n_views=n_views),
        )
        self.backward = AgentSide(
            name="backward",
            agent=b_agent,
            replay=ReplayBuffer(config["data.replay_capacity"]),
            demos=demos_b,
            disc=Discriminator(
                obs_mode, "image_plus_proprio", goal_b, reward_cfg, seed=seed + 40, n_views=n_views
            ),
        )
        self.use_gt_reward = config["reward.use_ground_truth"]
        self.forward_only = config["orchestrator.forward_only"]

        self.run_dir = run_dir
        self.metrics: MetricsWriter | None = None
        self.checkpoints: CheckpointManager | None = None
        if run_dir is not None:
            self.metrics = MetricsWriter(
                f"{run_dir}/metrics.csv", config["run.variant"], seed
            )
            self.checkpoints = CheckpointManager(run_dir, keep_n=config["checkpoint.keep"])
            write_manifest(
                run_dir,
                config,
                {
                    "forward": config["run.demos_forward"],
                    "backward": config["run.demos_backward"],
                },
            )
        self.eval_history: list[tuple[int, float, float]] = []
        self.nonfinite_reports = 0
        self.skipped_updates = 0
        self._stop = False

    # -- accessors ---------------------------------------------------------

    @property
    def active_side(self) -> AgentSide:
        return self.forward if self.state.active == "forward" else self.backward

    def session_info(self) -> dict:
        return {
            "mode": self.mode,
            "step": self.state.step_global,
            "active": self.state.active,
            "paused": self.state.paused,
            "variant": self.config["run.variant"],
        }

    def request_stop(self):
        self._stop = True

    # -- control -----------------------------------------------------------

    def _do_reset(self, cause: str):
        self.env.reset("initial_distribution")
        self.state.active = "forward"
        self.state.steps_since_switch = 0
        self.state.steps_since_reset = 0
        self.publisher.publish_session_info(
            {
                "event": "reset",
                "cause": cause,
                "step": self.state.step_global,
                "active": self.state.active,
            }
        )

    def _drain_commands(self):
        """Apply every pending command; called only at step boundaries."""
        while True:
            try:
                cmd: SessionCommand = self.mailbox.get_nowait()
            except queue.Empty:
                return
            if cmd.kind == "intervene_reset":
                self._do_reset(cause="intervention")
            elif cmd.kind == "pause":
                self.state.paused = True
                self.publisher.publish_session_info(
                    {"event": "paused", "step": self.state.step_global}
                )
            elif cmd.kind == "resume":
                self.state.paused = False
                self.publisher.publish_session_info(
                    {"event": "resumed", "step": self.state.step_global}
                )
            else:
                log.warning("command %s ignored in training mode", cmd.kind)

    def _boundary(self):
        """Post-step boundary: commands, scheduled resets, policy switching."""
        self._drain_commands()
        st = self.state
        if reset_due(
            st.steps_since_reset,
            st.step_global,
            self.config["orchestrator.reset_period"],
            self.config["orchestrator.initial_reset_every"],
            self.config["orchestrator.initial_reset_until"],
        ):
            self._do_reset(cause="schedule")
        elif not self.forward_only and st.steps_since_switch >= self.config["orchestrator.switch_period"]:
            st.active = "backward" if st.active == "forward" else "forward"
            st.steps_since_switch = 0
            self.publisher.publish_session_info(
                {"event": "switch", "step": st.step_global, "active": st.active}
            )

    # -- the loop ------------------------------------------------------------

    def run(self) -> list[tuple[int, float, float]]:
        cfg = self.config
        total = cfg["orchestrator.total_steps"]
        warmup = cfg["agent.warmup_steps"]
        obs = self.env.observe()
        try:
            while self.state.step_global < total and not self._stop:
                while self.state.paused:
                    self._drain_commands()
                    time.sleep(0.02)
                side = self.active_side
                if len(side.replay) < warmup:
                    action = Action(
                        delta_xy=self.np_rng.uniform(-1, 1, 2),
                        gripper_cmd=float(self.np_rng.uniform(-1, 1)),
                    )
                else:
                    action = side.agent.act(obs, explore=True)
                next_obs, gt_r, info = self.env.step(action)
                side.replay.insert(Transition(obs, action, next_obs, gt_reward=gt_r))
                self.state.step_global += 1
                self.state.steps_since_switch += 1
                self.state.steps_since_reset += 1

                classifier_loss = None
                if not self.use_gt_reward and side.disc.should_update(self.state.step_global):
                    classifier_loss = side.disc.train_event(side.replay)
                report = side.agent.train_tick(
                    side.replay,
                    side.demos,
                    self.state.step_global,
                    side.reward_fn(self.use_gt_reward),
                    rng=self.np_rng,
                )
                if report.n_bellman_updates > 0 and not report.is_finite():
                    self.nonfinite_reports += 1
                if report.skipped:
                    self.skipped_updates += 1
                self._publish_step(next_obs, gt_r, info)
                self._maybe_record_metrics(report, classifier_loss, info)
                self._boundary()
                if cfg["orchestrator.eval_period"] > 0 and (
                    self.state.step_global % cfg["orchestrator.eval_period"] == 0
                ):
                    self._run_evaluation()
                obs = self.env.observe()
        except Exception:
            # Leave a checkpoint behind before propagating.
            if self.checkpoints is not None:
                self._save_checkpoint(eval_success=-1.0)
            raise
        finally:
            if self.metrics is not None:
                self.metrics.close()
        return self.eval_history

    # -- evaluation ------------------------------------------------------------

    def _run_evaluation(self):
        success, mean_return = evaluate(
            self.forward.agent,
            self.eval_env,
            self.config["orchestrator.eval_episodes"],
            self.config["orchestrator.eval_horizon"],
        )
        step = self.state.step_global
        self.eval_history.append((step, success, mean_return))
        log.info("eval @%d: success %.2f return %.1f", step, success, mean_return)
        if self.metrics is not None:
            self.metrics.write(step, "eval", eval_success=success, eval_return=mean_return)
        self.publisher.publish_metrics(
            {"step": step, "eval_success": success, "eval_return": mean_return}
        )
        if self.checkpoints is not None:
            self._save_checkpoint(eval_success=success)

    def _save_checkpoint(self, eval_success: float):
        modules = {}
        optimizers = {}
        for side in (self.forward, self.backward):
            for k, m in side.agent.named_modules_for_checkpoint().items():
                modules[f"{side.name}.{k}"] = m
            for k, o in side.agent.named_optimizers_for_checkpoint().items():
                optimizers[f"{side.name}.{k}"] = o
            modules[f"{side.name}.disc"] = side.disc.net
        self.checkpoints.record(
            self.state.step_global,
            eval_success,
            modules,
            optimizers,
            meta={"variant": self.config["run.variant"], "seed": self.config["run.seed"]},
        )

    # -- telemetry ---------------------------------------------------------------

    def _publish_step(self, obs, reward, info):
        self.publisher.publish_frame(
            {
                "step": self.state.step_global,
                "active": self.state.active,
                "mode": "training",
                "state": self.env.state,
                "reward": reward,
                "reset_count": info["reset_count"],
            }
        )

    def _maybe_record_metrics(self, report: LossReport, classifier_loss, info):
        if self.metrics is None:
            return
        every = self.config["run.metrics_every"]
        if every <= 0 or self.state.step_global % every != 0:
            return
        self.metrics.write(
            self.state.step_global,
            "train",
            bellman_loss=report.bellman_loss,
            policy_q_term=report.policy_q_term,
            bc_term=report.bc_term,
            entropy=report.entropy,
            alpha=report.alpha,
            classifier_loss=classifier_loss,
            active=self.state.active,
            reset_count=info["reset_count"],
        )


def evaluate(
    agent: Agent,
    eval_env: ArenaEnv,
    n_episodes: int,
    horizon: int,
    seed_mode: str = "initial_distribution",
) -> tuple[float, float]:
    """Deploy the policy (distribution mean, no exploration noise) from fresh
    initial states. Rollouts touch no replay buffer; success means the task
    was completed at some step of the episode."""
    successes = 0
    returns = []
    for _ in range(n_episodes):
        obs = eval_env.reset(seed_mode)
        ep_return = 0.0
        reached = False
        for _ in range(horizon):
            action = agent.act(obs, explore=False)
            obs, r, _ = eval_env.step(action)
            ep_return += r
            reached = reached or r > 0.5
        successes += int(reached)
        returns.append(ep_return)
    return successes / n_episodes, float(np.mean(returns))


def evaluate_scripted(eval_env: ArenaEnv, n_episodes: int, horizon: int) -> tuple[float, float]:
    """Oracle-policy sanity evaluation using the scripted controller."""
    successes = 0
    returns = []
    for _ in range(n_episodes):
        eval_env.reset("initial_distribution")
        ep_return = 0.0
        reached = False
        for _ in range(horizon):
            a = scripted_expert(eval_env.state, "forward")
            _, r, _ = eval_env.step(a)
            ep_return += r
            reached = reached or r > 0.5
        successes += int(reached)
        returns.append(ep_return)
    return successes / n_episodes, float(np.mean(returns))


# -- demonstration collection -----------------------------------------------------


def collect_demonstrations(
    env: ArenaEnv,
    n_forward: int,
    n_backward: int,
    rng: np.random.Generator,
    noise_scale: float = 0.03,
    max_steps: int = 200,
    min_steps: int = 20,
) -> tuple[DemoSet, DemoSet]:
    """Scripted demonstration collection.

    Forward and backward trajectories are chained: each backward demo starts
    exactly where the forward demo ended, with no reset in between. Initial
    positions are drawn from the wide distribution so the demos cover much
    more of the arena than the evaluation initial states.
    """
    forward_trajs: list[list[Transition]] = []
    backward_trajs: list[list[Transition]] = []
    for _ in range(max(n_forward, n_backward)):
        obs = env.reset("wide_randomized")
        # Starting on the goal makes a degenerate forward demo; redraw.
        while np.linalg.norm(env.state.object_xy - env.state.goal_xy) < 0.25:
            obs = env.reset("wide_randomized")
        traj_f, obs = _expert_rollout(env, obs, "forward", rng, noise_scale, max_steps, min_steps)
        traj_b, obs = _expert_rollout(env, obs, "backward", rng, noise_scale, max_steps, min_steps)
        if len(forward_trajs) < n_forward:
            forward_trajs.append(traj_f)
        if len(backward_trajs) < n_backward:
            backward_trajs.append(traj_b)
    return DemoSet(forward_trajs, "forward"), DemoSet(backward_trajs, "backward")


def _expert_rollout(env, obs, direction, rng, noise_scale, max_steps, min_steps):
    traj: list[Transition] = []
    while len(traj) < max_steps:
        if expert_done(env.state, direction) and len(traj) >= min_steps:
            break
        a = scripted_expert(env.state, direction)
        noisy = Action(
            delta_xy=np.clip(a.delta_xy + rng.normal(scale=noise_scale, size=2), -1, 1),
            gripper_cmd=a.gripper_cmd,
        )
        next_obs, r, _ = env.step(noisy)
        traj.append(Transition(obs, noisy, next_obs, gt_reward=r))
        obs = next_obs
    return traj, obs


def load_demo_pair(config: RunConfig) -> tuple[DemoSet, DemoSet]:
    fwd = load_demos(config["run.demos_forward"])
    bwd = load_demos(config["run.demos_backward"])
    if fwd.direction != "forward" or bwd.direction != "backward":
        raise ValueError("demo files have mismatched directions")
    return fwd, bwd
