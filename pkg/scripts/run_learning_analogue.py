#!/usr/bin/env python3
"""Desk-scale learning experiments backing acceptance criteria 9-12.

Collects one shared set of scripted demonstrations, trains every variant for
three seeds (parallel worker processes), trains a behaviour-cloning baseline
on the same demos, runs the pixel-mode smoke, and writes
results/learning/summary.json for tests/test_acceptance.py.

Each run leaves a record.json in its own directory as soon as it finishes, so
an interrupted sweep resumes where it left off.

Full sweep is several CPU-hours; `--quick` shrinks everything for a wiring
check only (its numbers are meaningless).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
RESULTS = ROOT / "results" / "learning"

VARIANTS = [
    "medalpp",
    "ablation_true_reward",
    "ablation_no_ensemble",
    "ablation_no_bc_oversample",
    "naive_rl",
    "oracle_rl",
]
SEEDS = [0, 1, 2]

# Desk-scale analogue settings: paper-default ratios (N=10, M=2, utd=3,
# rho=0.25, K=20) on CPU-sized networks and batches.
ANALOGUE_OVERRIDES = {
    "env.obs_mode": "state",
    "approx.hidden_dim": 128,
    "approx.n_layers": 2,
    "agent.batch_size": 128,
    "agent.warmup_steps": 1000,
    "reward.steps_per_update": 25,
    "orchestrator.total_steps": 40_000,
    "orchestrator.eval_period": 2500,
    "orchestrator.eval_episodes": 10,
    "orchestrator.eval_horizon": 200,
    "orchestrator.switch_period": 200,
    "orchestrator.reset_period": 25_000,
    "orchestrator.initial_reset_every": 500,
    "orchestrator.initial_reset_until": 5000,
    "run.metrics_every": 500,
    "bridge.enabled": False,
    "checkpoint.keep": 2,
}

QUICK_OVERRIDES = {
    "orchestrator.total_steps": 1500,
    "orchestrator.eval_period": 500,
    "orchestrator.eval_episodes": 2,
    "orchestrator.eval_horizon": 50,
    "agent.warmup_steps": 200,
    "reward.steps_per_update": 5,
}

N_DEMOS = 10
FINAL_EVAL_EPISODES = 50


def demo_paths():
    return RESULTS / "demos_forward.jsonl", RESULTS / "demos_backward.jsonl"


def ensure_demos():
    import numpy as np

    from deskrl.data import save_demos
    from deskrl.env import ArenaEnv
    from deskrl.orchestrator import collect_demonstrations

    fwd_path, bwd_path = demo_paths()
    if fwd_path.exists() and bwd_path.exists():
        return
    RESULTS.mkdir(parents=True, exist_ok=True)
    env = ArenaEnv(task="pickplace", seed=999, obs_mode="state")
    rng = np.random.default_rng(999)
    demos_f, demos_b = collect_demonstrations(env, N_DEMOS, N_DEMOS, rng)
    save_demos(demos_f, fwd_path)
    save_demos(demos_b, bwd_path)
    print(f"collected {N_DEMOS} forward + {N_DEMOS} backward scripted demos", flush=True)


def build_config(variant: str, seed: int, quick: bool):
    from deskrl.config import load_config
    from deskrl.orchestrator import make_variant

    fwd_path, bwd_path = demo_paths()
    overrides = dict(ANALOGUE_OVERRIDES)
    if quick:
        overrides.update(QUICK_OVERRIDES)
    overrides.update(
        {
            "run.seed": seed,
            "run.demos_forward": str(fwd_path),
            "run.demos_backward": str(bwd_path),
            "run.out_dir": str(RESULTS / "runs" / f"{variant}_s{seed}"),
        }
    )
    cfg = load_config(overrides={k: v for k, v in overrides.items()})
    return make_variant(cfg, variant)


def run_one(args) -> dict:
    variant, seed, quick = args
    import torch

    torch.set_num_threads(1)

    import numpy as np

    from deskrl.env import ArenaEnv
    from deskrl.orchestrator import TrainingSession, evaluate, load_demo_pair
    from deskrl.plots import curve_area

    cfg = build_config(variant, seed, quick)
    run_dir = Path(cfg["run.out_dir"])
    record_path = run_dir / "record.json"
    if record_path.exists():
        print(f"[{variant} s{seed}] record exists, skipping", flush=True)
        return json.loads(record_path.read_text())

    t0 = time.time()
    demos_f, demos_b = load_demo_pair(cfg)
    session = TrainingSession(cfg, demos_f, demos_b, run_dir=run_dir)
    history = session.run()

    final_env = ArenaEnv(task=cfg["env.task"], seed=seed + 500_000, obs_mode=cfg["env.obs_mode"])
    final_success, final_return = evaluate(
        session.forward.agent, final_env, FINAL_EVAL_EPISODES, cfg["orchestrator.eval_horizon"]
    )
    wide_env = ArenaEnv(task=cfg["env.task"], seed=seed + 600_000, obs_mode=cfg["env.obs_mode"])
    success_wide, _ = evaluate(
        session.forward.agent,
        wide_env,
        FINAL_EVAL_EPISODES,
        cfg["orchestrator.eval_horizon"],
        seed_mode="wide_randomized",
    )

    steps = np.array([s for s, _, _ in history], dtype=float)
    succ = np.array([v for _, v, _ in history], dtype=float)
    record = {
        "variant": variant,
        "seed": seed,
        "curve": [[int(s), float(v)] for s, v in zip(steps, succ)],
        "curve_area": curve_area(steps, succ),
        "final_success": final_success,
        "final_return": final_return,
        "success_wide": success_wide,
        "steps_budget": cfg["orchestrator.total_steps"],
        "nonfinite_reports": session.nonfinite_reports,
        "skipped_updates": session.skipped_updates,
        "wall_time_s": round(time.time() - t0, 1),
    }
    record_path.write_text(json.dumps(record, indent=2) + "\n")
    print(
        f"[{variant} s{seed}] done in {record['wall_time_s']}s: "
        f"final {final_success:.2f}, wide {success_wide:.2f}",
        flush=True,
    )
    return record


def train_bc_baseline(quick: bool) -> dict:
    """Behaviour cloning on the same forward demos, same policy architecture."""
    import numpy as np
    import torch

    torch.set_num_threads(2)
    from deskrl.agent import Agent, AgentConfig
    from deskrl.data import load_demos
    from deskrl.env import ArenaEnv
    from deskrl.nets import grad_step, make_optimizer
    from deskrl.orchestrator import evaluate

    fwd_path, _ = demo_paths()
    demos = load_demos(fwd_path)
    cfg = AgentConfig(
        n_critics=2,
        target_subset=2,
        hidden_dim=ANALOGUE_OVERRIDES["approx.hidden_dim"],
        n_layers=ANALOGUE_OVERRIDES["approx.n_layers"],
    )
    agent = Agent("state", cfg, seed=123)
    opt = make_optimizer(agent.policy.parameters(), lr=3e-4)
    rng = np.random.default_rng(123)
    n_steps = 200 if quick else 6000
    for _ in range(n_steps):
        batch = demos.sample_batch(256, rng)
        feats = agent.featurizer(
            torch.from_numpy(batch.obs), torch.from_numpy(batch.obs_proprio)
        )
        loss = -agent.policy.log_prob(feats, torch.from_numpy(batch.action)).mean()
        grad_step(loss, [opt], list(agent.policy.parameters()))

    episodes = 10 if quick else FINAL_EVAL_EPISODES
    horizon = 50 if quick else 200
    wide_env = ArenaEnv(task="pickplace", seed=700_000, obs_mode="state")
    success_wide, _ = evaluate(agent, wide_env, episodes, horizon, seed_mode="wide_randomized")
    rho0_env = ArenaEnv(task="pickplace", seed=710_000, obs_mode="state")
    success_rho0, _ = evaluate(agent, rho0_env, episodes, horizon)
    result = {
        "n_demos": len(demos),
        "train_steps": n_steps,
        "success_wide": success_wide,
        "success_rho0": success_rho0,
    }
    print(f"[bc] wide {success_wide:.2f}, rho0 {success_rho0:.2f}", flush=True)
    return result


def augmentation_checks(env) -> bool:
    """The augmentation invariants, sampled on real renders."""
    import torch

    from deskrl.nets import augment, images_to_tensor

    import numpy as np

    frames = []
    rng = np.random.default_rng(0)
    from deskrl.env import Action

    for _ in range(16):
        env.step(Action(delta_xy=rng.uniform(-1, 1, 2), gripper_cmd=rng.uniform(-1, 1)))
        frames.append(env.observe().image)
    imgs = images_to_tensor(np.stack(frames))
    zero = augment(imgs, shifts=torch.zeros(16, 2, dtype=torch.long))
    if not torch.equal(zero, imgs):
        return False
    g = torch.Generator().manual_seed(1)
    out = augment(imgs, generator=g)
    if out.shape != imgs.shape or out.dtype != imgs.dtype:
        return False
    if float(out.min()) < 0 or float(out.max()) > 255:
        return False
    # Support coverage of the shift distribution.
    shifts = torch.randint(-4, 4 + 1, (2000, 2), generator=g)
    if set(shifts[:, 0].tolist()) != set(range(-4, 5)):
        return False
    return True


def run_pixel_smoke(quick: bool) -> dict:
    import torch

    torch.set_num_threads(2)
    from deskrl.env import ArenaEnv
    from deskrl.orchestrator import TrainingSession, load_demo_pair

    steps = 300 if quick else 5000
    overrides = dict(ANALOGUE_OVERRIDES)
    overrides.update(
        {
            "env.obs_mode": "pixel",
            "agent.batch_size": 16,
            "agent.utd": 1,
            "agent.warmup_steps": 200 if quick else 1000,
            "data.replay_capacity": steps + 10,
            "reward.batch_size": 32,
            "reward.steps_per_update": 3,
            "orchestrator.total_steps": steps,
            "orchestrator.eval_period": 0,
            "run.out_dir": str(RESULTS / "runs" / "pixel_smoke"),
            "run.metrics_every": 100,
        }
    )
    cfg = build_pixel_config(overrides)
    # Pixel-mode demos are collected fresh (images in the transitions).
    fwd, bwd = collect_pixel_demos()
    t0 = time.time()
    session = TrainingSession(cfg, fwd, bwd, run_dir=Path(cfg["run.out_dir"]))
    session.run()
    aug_ok = augmentation_checks(ArenaEnv(task="pickplace", seed=3, obs_mode="pixel"))
    smoke = {
        "steps": steps,
        "all_reports_finite": session.nonfinite_reports == 0,
        "skipped_updates": session.skipped_updates,
        "augment_checks_passed": aug_ok,
        "wall_time_s": round(time.time() - t0, 1),
    }
    print(f"[pixel] {steps} steps in {smoke['wall_time_s']}s, finite={smoke['all_reports_finite']}", flush=True)
    return smoke


def build_pixel_config(overrides: dict):
    from deskrl.config import load_config
    from deskrl.orchestrator import make_variant

    fwd_path, bwd_path = RESULTS / "demos_pixel_forward.jsonl", RESULTS / "demos_pixel_backward.jsonl"
    overrides = dict(overrides)
    overrides.update(
        {
            "run.demos_forward": str(fwd_path),
            "run.demos_backward": str(bwd_path),
        }
    )
    return make_variant(load_config(overrides=overrides), "medalpp")


def collect_pixel_demos():
    import numpy as np

    from deskrl.data import load_demos, save_demos
    from deskrl.env import ArenaEnv
    from deskrl.orchestrator import collect_demonstrations

    fwd_path = RESULTS / "demos_pixel_forward.jsonl"
    bwd_path = RESULTS / "demos_pixel_backward.jsonl"
    if fwd_path.exists() and bwd_path.exists():
        return load_demos(fwd_path), load_demos(bwd_path)
    env = ArenaEnv(task="pickplace", seed=999, obs_mode="pixel")
    rng = np.random.default_rng(999)
    demos_f, demos_b = collect_demonstrations(env, 3, 3, rng)
    save_demos(demos_f, fwd_path)
    save_demos(demos_b, bwd_path)
    return demos_f, demos_b


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--quick", action="store_true", help="tiny wiring check")
    parser.add_argument("--only", choices=VARIANTS + ["bc", "pixel"], default=None)
    parser.add_argument("--skip-pixel", action="store_true")
    args = parser.parse_args()

    RESULTS.mkdir(parents=True, exist_ok=True)
    ensure_demos()

    summary_path = RESULTS / "summary.json"
    summary = {"runs": {}, "analogue_overrides": {k: str(v) for k, v in ANALOGUE_OVERRIDES.items()}}
    if summary_path.exists():
        summary.update(json.loads(summary_path.read_text()))

    if args.only in (None,) or args.only in VARIANTS:
        variants = VARIANTS if args.only is None else [args.only]
        jobs = [(v, s, args.quick) for v in variants for s in SEEDS]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            records = list(pool.map(run_one, jobs))
        runs: dict[str, list] = {}
        for rec in records:
            runs.setdefault(rec["variant"], []).append(rec)
        summary.setdefault("runs", {}).update(runs)

    if args.only in (None, "bc"):
        summary["bc_baseline"] = train_bc_baseline(args.quick)

    if args.only in (None, "pixel") and not args.skip_pixel:
        summary["pixel_smoke"] = run_pixel_smoke(args.quick)

    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    print(f"summary written to {summary_path}", flush=True)


if __name__ == "__main__":
    main()
