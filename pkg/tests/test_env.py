import numpy as np
import pytest

from deskrl.env import (
    GOAL_TOLERANCE,
    RHO0_OBJECT_HIGH,
    RHO0_OBJECT_LOW,
    Action,
    ArenaEnv,
    EnvState,
    expert_done,
    in_rho0_object_support,
    render,
    scripted_expert,
)


def make_state(eff=(-0.5, -0.5), gripper=0.0, obj=(0.0, 0.0), held=False, goal=(0.6, 0.6)):
    return EnvState(
        effector_xy=np.array(eff, dtype=np.float64),
        gripper=gripper,
        object_xy=np.array(obj, dtype=np.float64),
        held=held,
        goal_xy=np.array(goal, dtype=np.float64),
    )


def zero_action():
    return Action(delta_xy=np.zeros(2), gripper_cmd=0.0)


class TestReward:
    def test_object_exactly_at_goal(self):
        s = make_state(obj=(0.6, 0.6))
        assert ArenaEnv.ground_truth_reward(s) == 1.0

    def test_object_outside_tolerance(self):
        s = make_state(obj=(0.6 + GOAL_TOLERANCE + 0.01, 0.6))
        assert ArenaEnv.ground_truth_reward(s) == 0.0

    def test_object_on_boundary(self):
        s = make_state(obj=(0.6 + GOAL_TOLERANCE, 0.6))
        assert ArenaEnv.ground_truth_reward(s) == 1.0


class TestStep:
    def test_nonfinite_action_rejected(self):
        env = ArenaEnv(seed=0)
        with pytest.raises(ValueError):
            env.step(Action(delta_xy=np.array([np.nan, 0.0]), gripper_cmd=0.0))
        with pytest.raises(ValueError):
            env.step(Action(delta_xy=np.zeros(2), gripper_cmd=float("inf")))

    def test_positions_stay_in_arena(self):
        env = ArenaEnv(seed=1)
        for _ in range(200):
            env.step(Action(delta_xy=np.array([1.0, 1.0]), gripper_cmd=1.0))
        assert np.all(env.state.effector_xy <= 1.0)
        assert np.all(env.state.effector_xy >= -1.0)

    def test_no_automatic_reset_over_25000_steps(self):
        env = ArenaEnv(seed=2)
        a = Action(delta_xy=np.array([0.3, -0.2]), gripper_cmd=0.1)
        for _ in range(25_000):
            env.step(a)
        assert env.reset_count == 0

    def test_zero_action_is_fixed_point(self):
        env = ArenaEnv(seed=3)
        env.reset()
        before = env.state
        env.step(zero_action())
        after = env.state
        assert np.allclose(before.effector_xy, after.effector_xy)
        assert np.allclose(before.object_xy, after.object_xy)
        assert before.gripper == after.gripper
        assert before.held == after.held

    def test_grasp_requires_open_gripper(self):
        env = ArenaEnv(seed=4)
        env.state = make_state(eff=(0.0, 0.0), gripper=1.0, obj=(0.0, 0.0))
        env.step(Action(delta_xy=np.zeros(2), gripper_cmd=1.0))
        assert not env.state.held
        # Re-open past the half-way mark, then close again: now it grasps.
        for _ in range(3):
            env.step(Action(delta_xy=np.zeros(2), gripper_cmd=-1.0))
        env.step(Action(delta_xy=np.zeros(2), gripper_cmd=1.0))
        assert env.state.held

    def test_held_object_follows_effector(self):
        env = ArenaEnv(seed=5)
        env.state = make_state(eff=(0.0, 0.0), gripper=0.0, obj=(0.0, 0.0))
        env.step(Action(delta_xy=np.zeros(2), gripper_cmd=1.0))
        assert env.state.held
        env.step(Action(delta_xy=np.array([1.0, 0.0]), gripper_cmd=1.0))
        assert np.allclose(env.state.object_xy, env.state.effector_xy)

    def test_release_drops_object_in_place(self):
        env = ArenaEnv(seed=6)
        env.state = make_state(eff=(0.0, 0.0), gripper=0.0, obj=(0.0, 0.0))
        env.step(Action(delta_xy=np.zeros(2), gripper_cmd=1.0))
        env.step(Action(delta_xy=np.array([1.0, 0.0]), gripper_cmd=1.0))
        drop_at = env.state.object_xy.copy()
        env.step(Action(delta_xy=np.zeros(2), gripper_cmd=-1.0))
        assert not env.state.held
        env.step(Action(delta_xy=np.array([-1.0, 0.0]), gripper_cmd=-1.0))
        assert np.allclose(env.state.object_xy, drop_at)


class TestReset:
    def test_seeded_determinism(self):
        a = ArenaEnv(seed=42)
        b = ArenaEnv(seed=42)
        sa = a.reset("initial_distribution")
        sb = b.reset("initial_distribution")
        assert np.array_equal(sa.state_vec, sb.state_vec)
        assert np.array_equal(a.state.effector_xy, b.state.effector_xy)

    def test_wide_support_strictly_contains_rho0(self):
        env = ArenaEnv(seed=7)
        rho0 = np.array([env._sample_state("initial_distribution").object_xy for _ in range(1000)])
        wide = np.array([env._sample_state("wide_randomized").object_xy for _ in range(1000)])
        assert wide.min(axis=0).max() < rho0.min(axis=0).min()
        assert wide.max(axis=0).min() > rho0.max(axis=0).max()
        # rho0 samples all fall inside the wide bounding box.
        assert np.all(rho0 >= wide.min(axis=0)) and np.all(rho0 <= wide.max(axis=0))

    def test_reset_clears_held(self):
        env = ArenaEnv(seed=8)
        env.state = make_state(held=True, gripper=1.0)
        env.reset()
        assert not env.state.held
        assert env.state.gripper == 0.0

    def test_reset_increments_counter(self):
        env = ArenaEnv(seed=9)
        assert env.reset_count == 0
        env.reset()
        env.reset("wide_randomized")
        assert env.reset_count == 2


class TestTrajectoryDeterminism:
    def test_same_seed_same_actions_same_trajectory(self):
        rng = np.random.default_rng(0)
        actions = [Action(delta_xy=rng.uniform(-1, 1, 2), gripper_cmd=rng.uniform(-1, 1)) for _ in range(100)]
        vecs = []
        for _ in range(2):
            env = ArenaEnv(seed=11)
            env.reset()
            tr = []
            for a in actions:
                obs, r, _ = env.step(a)
                tr.append(obs.state_vec)
            vecs.append(np.array(tr))
        assert np.array_equal(vecs[0], vecs[1])

    def test_state_and_pixel_mode_share_dynamics(self):
        rng = np.random.default_rng(1)
        actions = [Action(delta_xy=rng.uniform(-1, 1, 2), gripper_cmd=rng.uniform(-1, 1)) for _ in range(50)]
        env_s = ArenaEnv(seed=12, obs_mode="state")
        env_p = ArenaEnv(seed=12, obs_mode="pixel")
        env_s.reset()
        env_p.reset()
        for a in actions:
            env_s.step(a)
            env_p.step(a)
            assert np.array_equal(env_s.state.to_vector(), env_p.state.to_vector())


class TestRender:
    def test_deterministic(self):
        s = make_state()
        assert np.array_equal(render(s), render(s))

    def test_object_move_changes_image(self):
        a = make_state(obj=(0.0, 0.0))
        b = make_state(obj=(0.05, 0.0))  # > one pixel cell (cell ~= 0.024)
        assert not np.array_equal(render(a), render(b))

    def test_goal_reached_vs_far_state_differ(self):
        near = make_state(obj=(0.6, 0.6))
        far = make_state(obj=(-0.6, -0.6))
        l1 = np.abs(render(near).astype(int) - render(far).astype(int)).sum()
        assert l1 > 0

    def test_shape_and_dtype(self):
        img = render(make_state())
        assert img.shape == (84, 84, 3)
        assert img.dtype == np.uint8

    def test_pixel_observation_matches_render(self):
        env = ArenaEnv(seed=13, obs_mode="pixel")
        obs = env.observe()
        assert np.array_equal(obs.image, render(env.state))


def rollout_expert(env, direction, max_steps=200):
    steps = 0
    while steps < max_steps and not expert_done(env.state, direction):
        env.step(scripted_expert(env.state, direction))
        steps += 1
    return steps


class TestScriptedExpert:
    def test_object_at_goal_gives_near_zero_delta(self):
        s = make_state(obj=(0.6, 0.6), eff=(0.0, 0.0))
        a = scripted_expert(s, "forward")
        assert np.linalg.norm(a.delta_xy) < 1e-9

    def test_forward_success_rate(self):
        env = ArenaEnv(seed=100)
        successes = 0
        for _ in range(100):
            env.reset("initial_distribution")
            rollout_expert(env, "forward")
            if ArenaEnv.ground_truth_reward(env.state) == 1.0:
                successes += 1
        assert successes >= 95

    def test_forward_then_backward_returns_object_to_rho0_support(self):
        env = ArenaEnv(seed=101)
        for _ in range(20):
            env.reset("wide_randomized")
            rollout_expert(env, "forward")
            rollout_expert(env, "backward")
            assert in_rho0_object_support(env.state.object_xy)

    def test_expert_recovers_from_closed_gripper(self):
        env = ArenaEnv(seed=102)
        env.state = make_state(eff=(0.0, 0.0), gripper=1.0, obj=(0.01, 0.0))
        steps = rollout_expert(env, "forward")
        assert steps < 200
        assert ArenaEnv.ground_truth_reward(env.state) == 1.0


class TestSupportHelpers:
    def test_rho0_box(self):
        assert in_rho0_object_support(np.array([-0.4, -0.4]))
        assert in_rho0_object_support(np.array(RHO0_OBJECT_LOW))
        assert in_rho0_object_support(np.array(RHO0_OBJECT_HIGH))
        assert not in_rho0_object_support(np.array([0.0, 0.0]))
