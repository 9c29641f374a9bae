"""Learning-curve emission: success rate versus environment steps, mean with
a min/max band across seeds, one labeled curve per variant."""

from __future__ import annotations

import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import read_metrics

log = logging.getLogger(__name__)


def _eval_curve(rows: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    pts = [
        (int(r["step"]), float(r["eval_success"]))
        for r in rows
        if r["kind"] == "eval" and r["eval_success"] != ""
    ]
    pts.sort()
    if not pts:
        return np.array([]), np.array([])
    steps, vals = zip(*pts)
    return np.array(steps), np.array(vals)


def collect_curves(metrics_files: list[str | Path]) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
    by_variant: dict[str, list] = defaultdict(list)
    for path in metrics_files:
        rows = read_metrics(path)
        if not rows:
            continue
        steps, vals = _eval_curve(rows)
        if len(steps) == 0:
            continue
        by_variant[rows[0]["variant"]].append((steps, vals))
    return by_variant


def _common_grid(curves: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    grids = [tuple(s.tolist()) for s, _ in curves]
    if len(set(grids)) == 1:
        return curves[0][0]
    log.warning("metrics step grids differ across seeds; resampling to a common grid")
    lo = max(float(s.min()) for s, _ in curves)
    hi = min(float(s.max()) for s, _ in curves)
    n = max(len(s) for s, _ in curves)
    return np.linspace(lo, hi, n)


def emit_curves(metrics_files: list[str | Path], out_path: str | Path, title: str = "") -> Path:
    """One figure: per-variant mean curve with a min/max shaded band."""
    by_variant = collect_curves(metrics_files)
    if not by_variant:
        raise ValueError("no evaluation data found in the given metrics files")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for variant in sorted(by_variant):
        curves = by_variant[variant]
        grid = _common_grid(curves)
        stacked = np.stack(
            [np.interp(grid, s, v) for s, v in curves]
        )
        mean = stacked.mean(axis=0)
        ax.plot(grid, mean, label=f"{variant} (n={len(curves)})")
        if len(curves) > 1:
            ax.fill_between(grid, stacked.min(axis=0), stacked.max(axis=0), alpha=0.2)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("evaluation success rate")
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def curve_area(steps: np.ndarray, values: np.ndarray) -> float:
    """Area under a success curve, for variant-over-variant comparisons."""
    if len(steps) < 2:
        return 0.0
    return float(np.trapezoid(values, steps)) if hasattr(np, "trapezoid") else float(
        np.trapz(values, steps)
    )
