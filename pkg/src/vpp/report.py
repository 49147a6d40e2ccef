"""Figures written next to the CSV/JSON outputs of train and ablate runs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 10,
}


def rolling_mean(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(v.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def learning_curves(curves: dict, path, window: int = 20, title: str | None = None,
                    threshold: float | None = None) -> Path:
    """``curves`` maps a label to metric rows (dicts with step and mean_group_reward)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for label, rows in curves.items():
            steps = [r["step"] for r in rows]
            rew = [r["mean_group_reward"] for r in rows]
            line, = ax.plot(steps, rew, alpha=0.25, linewidth=0.8)
            ax.plot(steps, rolling_mean(rew, window), color=line.get_color(), label=label)
        if threshold is not None:
            ax.axhline(threshold, color="k", linestyle=":", linewidth=1)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("mean per-step group reward")
        if title:
            ax.set_title(title)
        if len(curves) > 1:
            ax.legend()
        return _save(fig, path)


def ablation_bars(cells: list[dict], path, title: str | None = None) -> Path:
    """One bar per sweep cell with the std over seeds as the error bar."""
    labels = [c["label"] for c in cells]
    means = [c["final_mean"] for c in cells]
    stds = [c["final_std"] for c in cells]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(cells) + 2), 4.0))
        ax.bar(range(len(cells)), means, yerr=stds, capsize=3, color="#4c72b0")
        ax.set_xticks(range(len(cells)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("final mean group reward")
        if title:
            ax.set_title(title)
        return _save(fig, path)
