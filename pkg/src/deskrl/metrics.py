"""Append-only CSV metrics sink and the run manifest.

The writer owns a consumer thread fed by a queue, so the trainer and the
bridge can both emit rows without blocking each other; every row is flushed
so a crash leaves a readable prefix.
"""

from __future__ import annotations

import csv
import hashlib
import json
import queue
import sys
import threading
import time
from pathlib import Path

import numpy as np
import torch

COLUMNS = [
    "step",
    "wall_time",
    "variant",
    "seed",
    "kind",  # train | eval
    "eval_success",
    "eval_return",
    "bellman_loss",
    "policy_q_term",
    "bc_term",
    "entropy",
    "alpha",
    "classifier_loss",
    "reward_mean",
    "active",
    "reset_count",
]


class MetricsWriter:
    def __init__(self, path: str | Path, variant: str, seed: int):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.variant = variant
        self.seed = seed
        self._queue: queue.Queue = queue.Queue()
        self._last_eval_step = -1
        self._file = self.path.open("w", newline="")
        self._csv = csv.DictWriter(self._file, fieldnames=COLUMNS)
        self._csv.writeheader()
        self._file.flush()
        self._thread = threading.Thread(target=self._drain, daemon=True)
        self._thread.start()

    def write(self, step: int, kind: str, **metrics):
        if kind == "eval":
            if step <= self._last_eval_step:
                raise ValueError(
                    f"evaluation steps must strictly increase (got {step} after {self._last_eval_step})"
                )
            self._last_eval_step = step
        row = {c: "" for c in COLUMNS}
        row.update(
            step=step,
            wall_time=f"{time.time():.3f}",
            variant=self.variant,
            seed=self.seed,
            kind=kind,
        )
        for k, v in metrics.items():
            if k not in COLUMNS:
                raise KeyError(f"unknown metrics column {k!r}")
            row[k] = "" if v is None else v
        self._queue.put(row)

    def _drain(self):
        while True:
            row = self._queue.get()
            if row is None:
                return
            self._csv.writerow(row)
            self._file.flush()

    def close(self):
        self._queue.put(None)
        self._thread.join(timeout=5)
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open() as f:
        return list(csv.DictReader(f))


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: str | Path, config, demo_paths: dict[str, str]) -> Path:
    """Everything needed to reproduce the run: full config plus its hash,
    content hashes of the demo files, and substrate versions."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config.as_dict(),
        "config_hash": config.config_hash(),
        "demo_files": {
            name: {"path": str(p), "sha256": file_sha256(p)}
            for name, p in demo_paths.items()
            if p and Path(p).exists()
        },
        "versions": {
            "python": sys.version.split()[0],
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
