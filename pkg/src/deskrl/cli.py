"""Command-line entry points: training runs, demo collection, checkpoint
evaluation, and learning-curve plots."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import click
import numpy as np

from .agent import Agent
from .config import load_config, parse_override_args, schema_documentation
from .data import save_demos
from .env import ArenaEnv
from .nets import load_checkpoint
from .orchestrator import (
    TrainingSession,
    agent_config_from,
    collect_demonstrations,
    evaluate,
    load_demo_pair,
    make_variant,
)
from .plots import emit_curves

log = logging.getLogger(__name__)


@click.group()
@click.option("--verbose", is_flag=True, help="debug logging")
def main(verbose):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--variant", default="medalpp", show_default=True)
@click.option("--seed", type=int, default=None, help="overrides run.seed")
@click.option("--set", "overrides", multiple=True, help="config override key=value")
@click.option("--headless", is_flag=True, help="disable the bridge service")
def train(config_path, variant, seed, overrides, headless):
    """Run autonomous training (Algorithm-style forward/backward loop)."""
    cfg = load_config(config_path, parse_override_args(list(overrides)))
    cfg = make_variant(cfg, variant)
    extra = {}
    if seed is not None:
        extra["run.seed"] = seed
    if headless:
        extra["bridge.enabled"] = False
    if extra:
        cfg = cfg.with_overrides(extra)

    demos_f, demos_b = load_demo_pair(cfg)
    run_dir = Path(cfg["run.out_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    session = TrainingSession(cfg, demos_f, demos_b, run_dir=run_dir)

    server = None
    if cfg["bridge.enabled"]:
        from .bridge import serve

        server = serve(session, port=cfg["bridge.port"], frame_rate=cfg["bridge.frame_rate"])
        session.publisher = server
        click.echo(f"bridge serving on port {server.port}")
    try:
        history = session.run()
    finally:
        if server is not None:
            server.stop()
    if history:
        step, success, ret = history[-1]
        click.echo(f"final evaluation @{step}: success {success:.2f}, return {ret:.1f}")
    click.echo(f"artifacts in {run_dir}")


@main.command("collect-demos")
@click.option("--source", type=click.Choice(["scripted", "teleop"]), default="scripted")
@click.option("--n", "n_forward", type=int, default=50, show_default=True)
@click.option("--n-backward", type=int, default=None, help="defaults to --n")
@click.option("--out-forward", type=click.Path(), default="demos_forward.jsonl")
@click.option("--out-backward", type=click.Path(), default="demos_backward.jsonl")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--set", "overrides", multiple=True)
def collect_demos(source, n_forward, n_backward, out_forward, out_backward, config_path, seed, overrides):
    """Collect chained forward/backward demonstrations."""
    cfg = load_config(config_path, parse_override_args(list(overrides)))
    if seed is not None:
        cfg = cfg.with_overrides({"run.seed": seed})
    n_backward = n_forward if n_backward is None else n_backward

    if source == "scripted":
        env = ArenaEnv(task=cfg["env.task"], seed=cfg["run.seed"], obs_mode=cfg["env.obs_mode"])
        rng = np.random.default_rng(cfg["run.seed"])
        demos_f, demos_b = collect_demonstrations(env, n_forward, n_backward, rng)
        save_demos(demos_f, out_forward)
        save_demos(demos_b, out_backward)
    else:
        from .bridge import DemoCollectionSession, serve

        session = DemoCollectionSession(cfg)
        server = serve(session, port=cfg["bridge.port"], frame_rate=cfg["bridge.frame_rate"])
        session.publisher = server
        click.echo(
            f"teleop session on port {server.port}; collecting {n_forward} forward "
            f"+ {n_backward} backward demos"
        )
        try:
            session.run(
                until=lambda s: len(s.trajectories["forward"]) >= n_forward
                and len(s.trajectories["backward"]) >= n_backward
            )
        finally:
            server.stop()
        demos_f, demos_b = session.save(out_forward, out_backward)
    click.echo(
        f"saved {len(demos_f)} forward demos to {out_forward}, "
        f"{len(demos_b)} backward demos to {out_backward}"
    )


def load_forward_agent(checkpoint_path: str | Path, config) -> Agent:
    """Rebuild the forward policy from a training checkpoint."""
    agent = Agent(config["env.obs_mode"], agent_config_from(config), seed=config["run.seed"])
    modules = {
        "forward.featurizer": agent.featurizer,
        "forward.policy": agent.policy,
        "forward.q": agent.q,
        "forward.q_target": agent.q_target,
        "forward.alpha": agent._alpha_holder,
    }
    load_checkpoint(checkpoint_path, modules)
    return agent


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--episodes", type=int, default=50, show_default=True)
@click.option("--horizon", type=int, default=200, show_default=True)
@click.option("--wide", is_flag=True, help="evaluate from wide-randomized initial states")
@click.option("--seed", type=int, default=1234)
def evaluate_cmd(checkpoint, episodes, horizon, wide, seed):
    """Roll out a checkpointed forward policy with ground-truth success."""
    ckpt = Path(checkpoint)
    manifest_path = ckpt.parent.parent / "manifest.json"
    if not manifest_path.exists():
        raise click.ClickException(f"no manifest next to checkpoint: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = load_config(overrides=manifest["config"])
    agent = load_forward_agent(ckpt, cfg)
    env = ArenaEnv(task=cfg["env.task"], seed=seed, obs_mode=cfg["env.obs_mode"])
    mode = "wide_randomized" if wide else "initial_distribution"
    success, mean_return = evaluate(agent, env, episodes, horizon, seed_mode=mode)
    click.echo(f"success {success:.3f} mean_return {mean_return:.2f} over {episodes} episodes")


@main.command("emit-curves")
@click.argument("metrics_files", nargs=-1, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default="curves.png", show_default=True)
@click.option("--title", default="")
def emit_curves_cmd(metrics_files, out, title):
    """Plot success-rate curves (mean with min/max band across seeds)."""
    if not metrics_files:
        raise click.ClickException("no metrics files given")
    try:
        path = emit_curves(list(metrics_files), out, title=title)
    except ValueError as err:
        raise click.ClickException(str(err)) from None
    click.echo(f"wrote {path}")


@main.command("config-schema")
def config_schema_cmd():
    """Print every config key with type, default, and description."""
    click.echo(schema_documentation())


if __name__ == "__main__":
    main()
