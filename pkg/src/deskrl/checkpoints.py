"""Checkpoint lifecycle: periodic saves at evaluation cadence, rotation of
the newest ``keep_n``, and pinning of the best-by-eval-success checkpoint."""

from __future__ import annotations

import json
from pathlib import Path

from .nets import save_checkpoint


class CheckpointManager:
    def __init__(self, run_dir: str | Path, keep_n: int = 5):
        if keep_n < 1:
            raise ValueError("keep_n must be >= 1")
        self.dir = Path(run_dir) / "checkpoints"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.keep_n = keep_n
        self._index_path = self.dir / "index.json"
        self._index: dict[str, dict] = {}
        if self._index_path.exists():
            self._index = json.loads(self._index_path.read_text())

    def path_for(self, step: int) -> Path:
        return self.dir / f"ckpt_{step:09d}.pt"

    def record(self, step: int, eval_success: float, modules, optimizers=None, meta=None):
        """Save a checkpoint, update the index, prune old ones."""
        path = self.path_for(step)
        meta = dict(meta or {})
        meta.update(step=step, eval_success=eval_success)
        save_checkpoint(path, modules, optimizers, meta=meta)
        self._index[str(step)] = {"file": path.name, "eval_success": eval_success}
        self._write_index()
        self.rotate()
        return path

    def best_step(self) -> int | None:
        if not self._index:
            return None
        # Highest success; ties break toward the latest step.
        return max(self._index, key=lambda s: (self._index[s]["eval_success"], int(s)))

    def rotate(self):
        """Delete everything older than the newest keep_n, except the pinned
        best-by-eval-success checkpoint."""
        steps = sorted(self._index, key=int)
        keep = set(steps[-self.keep_n :])
        best = self.best_step()
        if best is not None:
            keep.add(best)
        for s in steps:
            if s not in keep:
                path = self.dir / self._index[s]["file"]
                path.unlink(missing_ok=True)
                del self._index[s]
        self._write_index()

    def retained_steps(self) -> list[int]:
        return sorted(int(s) for s in self._index)

    def best_path(self) -> Path | None:
        best = self.best_step()
        return None if best is None else self.dir / self._index[best]["file"]

    def recorded_success(self, step: int) -> float:
        return self._index[str(step)]["eval_success"]

    def _write_index(self):
        self._index_path.write_text(json.dumps(self._index, indent=2) + "\n")
