"""Run configuration: a flat, schema-validated key-value map.

Config files are YAML, either flat dotted keys or nested sections; unknown
keys and type mismatches are rejected by name. CLI overrides arrive as
``key=value`` strings and are coerced through the same schema.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .env import TASKS


@dataclass(frozen=True)
class KeySpec:
    type: type
    default: object
    doc: str
    choices: tuple | None = None


SCHEMA: dict[str, KeySpec] = {
    # environment
    "env.task": KeySpec(str, "pickplace", "task variant", tuple(sorted(TASKS))),
    "env.obs_mode": KeySpec(str, "state", "observation mode", ("state", "pixel")),
    # data
    "data.replay_capacity": KeySpec(int, 300_000, "replay ring size per direction"),
    "data.last_k": KeySpec(int, 20, "trailing states per demo used as forward positives"),
    # function approximation
    "approx.hidden_dim": KeySpec(int, 1024, "policy/critic hidden width"),
    "approx.n_layers": KeySpec(int, 4, "policy/critic hidden depth"),
    "approx.n_views": KeySpec(int, 1, "camera views concatenated channel-wise"),
    "approx.lr": KeySpec(float, 1e-4, "learning rate for all parameter groups"),
    # agent
    "agent.n_critics": KeySpec(int, 10, "critic ensemble size"),
    "agent.target_subset": KeySpec(int, 2, "target heads drawn per target computation"),
    "agent.gamma": KeySpec(float, 0.99, "discount"),
    "agent.tau": KeySpec(float, 0.01, "EMA rate for target networks"),
    "agent.rho": KeySpec(float, 0.25, "expert oversampling fraction"),
    "agent.batch_size": KeySpec(int, 256, "policy/critic batch size"),
    "agent.utd": KeySpec(int, 3, "critic updates per environment step"),
    "agent.lambda_start": KeySpec(float, 1.0, "BC coefficient at step 0"),
    "agent.lambda_end": KeySpec(float, 0.1, "BC coefficient after decay"),
    "agent.lambda_decay_steps": KeySpec(int, 50_000, "linear BC decay horizon"),
    "agent.entropy_mode": KeySpec(str, "auto", "entropy bonus", ("auto", "fixed", "off")),
    "agent.entropy_coef": KeySpec(float, 0.1, "entropy coefficient when fixed"),
    "agent.warmup_steps": KeySpec(int, 1000, "env steps before updates begin"),
    "agent.per_sample_subset": KeySpec(bool, False, "independent target subset per sample"),
    # learned reward
    "reward.update_period": KeySpec(int, 1000, "env steps between classifier update events"),
    "reward.steps_per_update": KeySpec(int, 1, "gradient steps per update event"),
    "reward.batch_size": KeySpec(int, 512, "classifier batch size"),
    "reward.r_max": KeySpec(float, 10.0, "learned reward clip"),
    "reward.mixup_alpha": KeySpec(float, 1.0, "mixup Beta parameter"),
    "reward.form": KeySpec(
        str, "neg_log_one_minus", "reward transform", ("neg_log_one_minus", "logit_difference")
    ),
    "reward.lr": KeySpec(float, 1e-4, "classifier learning rate"),
    "reward.use_ground_truth": KeySpec(bool, False, "bypass classifier (true-reward ablation)"),
    # orchestrator
    "orchestrator.total_steps": KeySpec(int, 150_000, "training env steps"),
    "orchestrator.switch_period": KeySpec(int, 200, "steps before switching policies"),
    "orchestrator.reset_period": KeySpec(int, 25_000, "steps between scheduled resets (0 = never)"),
    "orchestrator.initial_reset_every": KeySpec(
        int, 500, "seeded-diversity phase reset cadence (0 = disabled)"
    ),
    "orchestrator.initial_reset_until": KeySpec(int, 5000, "seeded-diversity phase length"),
    "orchestrator.forward_only": KeySpec(bool, False, "train only the doing policy"),
    "orchestrator.share_encoder": KeySpec(bool, False, "share the visual encoder across directions"),
    "orchestrator.eval_period": KeySpec(int, 10_000, "steps between evaluations"),
    "orchestrator.eval_episodes": KeySpec(int, 10, "episodes per evaluation"),
    "orchestrator.eval_horizon": KeySpec(int, 200, "steps per evaluation episode"),
    "orchestrator.recenter_period": KeySpec(
        int, 0, "periodic effector recentering cadence (0 = disabled)"
    ),
    # run identity / artifacts
    "run.seed": KeySpec(int, 0, "master seed"),
    "run.out_dir": KeySpec(str, "runs/run", "artifact directory"),
    "run.variant": KeySpec(str, "medalpp", "variant name recorded in metrics"),
    "run.demos_forward": KeySpec(str, "", "path to forward demonstrations"),
    "run.demos_backward": KeySpec(str, "", "path to backward demonstrations"),
    "run.metrics_every": KeySpec(int, 500, "steps between training metric rows"),
    # checkpoints
    "checkpoint.keep": KeySpec(int, 5, "recent checkpoints retained (best is pinned)"),
    # bridge
    "bridge.enabled": KeySpec(bool, True, "serve the session protocol"),
    "bridge.port": KeySpec(int, 8765, "bridge TCP port"),
    "bridge.frame_rate": KeySpec(float, 10.0, "frame messages per second"),
}


class RunConfig:
    """Validated flat config. Read-only by convention; ``with_overrides``
    produces modified copies."""

    def __init__(self, values: dict):
        unknown = set(values) - set(SCHEMA)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        for k, v in values.items():
            self._values[k] = _coerce(k, v)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise KeyError(f"unknown config key {key!r}")
        return self._values[key]

    def get(self, key: str):
        return self[key]

    def as_dict(self) -> dict:
        return dict(self._values)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self._values)
        for k, v in overrides.items():
            if k not in SCHEMA:
                raise ValueError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        return RunConfig(merged)

    def config_hash(self) -> str:
        canonical = json.dumps(self._values, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values


def _coerce(key: str, value):
    spec = SCHEMA[key]
    if spec.type is bool:
        if isinstance(value, bool):
            out = value
        elif isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            out = value.lower() in ("true", "1")
        else:
            raise ValueError(f"config key {key!r} expects a bool, got {value!r}")
    elif spec.type is int:
        if isinstance(value, bool) or (not isinstance(value, int) and not _intlike(value)):
            raise ValueError(f"config key {key!r} expects an int, got {value!r}")
        out = int(value)
    elif spec.type is float:
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ValueError(f"config key {key!r} expects a float, got {value!r}") from None
    else:
        if not isinstance(value, str):
            raise ValueError(f"config key {key!r} expects a string, got {value!r}")
        out = value
    if spec.choices is not None and out not in spec.choices:
        raise ValueError(
            f"config key {key!r} must be one of {list(spec.choices)}, got {out!r}"
        )
    return out


def _intlike(value) -> bool:
    if isinstance(value, str):
        try:
            int(value)
            return True
        except ValueError:
            return False
    return isinstance(value, float) and value.is_integer()


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, prefix=f"{key}."))
        else:
            flat[key] = v
    return flat


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, overlaid with the file, overlaid with explicit overrides."""
    values: dict = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        values = _flatten(raw)
    cfg = RunConfig(values)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def parse_override_args(pairs: list[str]) -> dict:
    """CLI ``key=value`` strings into an override mapping."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"override {pair!r} must look like key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def schema_documentation() -> str:
    """Human-readable schema dump, one line per key."""
    lines = ["# deskrl configuration keys", ""]
    section = ""
    for key in SCHEMA:
        sec = key.split(".")[0]
        if sec != section:
            lines.append(f"## {sec}")
            section = sec
        spec = SCHEMA[key]
        choice = f" choices={list(spec.choices)}" if spec.choices else ""
        lines.append(
            f"- `{key}` ({spec.type.__name__}, default {spec.default!r}){choice}: {spec.doc}"
        )
    return "\n".join(lines) + "\n"
