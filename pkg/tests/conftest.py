import numpy as np
import pytest

from deskrl.config import load_config
from deskrl.env import ArenaEnv
from deskrl.orchestrator import collect_demonstrations


@pytest.fixture(scope="session")
def demo_pair():
    """Small scripted demo sets shared across tests."""
    env = ArenaEnv(task="pickplace", seed=777, obs_mode="state")
    rng = np.random.default_rng(777)
    return collect_demonstrations(env, n_forward=4, n_backward=4, rng=rng)


@pytest.fixture
def tiny_config(tmp_path):
    """A config small and fast enough for in-test training loops."""
    return load_config(
        overrides={
            "agent.n_critics": "3",
            "agent.target_subset": "2",
            "agent.batch_size": "16",
            "agent.utd": "1",
            "agent.warmup_steps": "50",
            "approx.hidden_dim": "32",
            "approx.n_layers": "1",
            "data.replay_capacity": "5000",
            "data.last_k": "5",
            "reward.batch_size": "32",
            "orchestrator.total_steps": "300",
            "orchestrator.eval_period": "0",
            "orchestrator.initial_reset_every": "0",
            "orchestrator.reset_period": "0",
            "run.out_dir": str(tmp_path / "run"),
            "run.metrics_every": "100",
            "bridge.enabled": "false",
        }
    )
