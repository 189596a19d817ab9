"""Report figures rendered next to the delimited outputs.

Training emits a loss-curve PNG beside the loss log; evaluation emits a
metric bar chart beside the results file. Figures carry no metadata so
repeated runs produce byte-identical files.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .training import LossReport

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


def save_loss_curves(history: Sequence[LossReport], path: str | Path) -> None:
    """Per-step curves of the total and each component loss."""
    steps = [r.step for r in history]
    fig, (ax, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]}
    )
    ax.plot(steps, [r.total for r in history], label="total", color="black", lw=1.5)
    ax.plot(steps, [r.l_intra for r in history], label="intra", lw=0.9)
    for term in ("avc", "atc", "tvc", "ttc"):
        ax.plot(steps, [getattr(r, f"l_{term}") for r in history], label=term, lw=0.9, alpha=0.8)
    ax.set_ylabel("loss")
    ax.legend(ncol=3, fontsize=8, frameon=False)
    ax_lr.plot(steps, [r.lr for r in history], color="tab:gray", lw=1.0)
    ax_lr.set_ylabel("lr")
    ax_lr.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_metric_bars(rows: Sequence[tuple[str, float, str, str]], path: str | Path) -> None:
    """Horizontal bars for (metric, value, dataset, direction) result rows."""
    if not rows:
        return
    labels = [f"{dataset} [{direction}] {metric}" for metric, _, dataset, direction in rows]
    values = [value for _, value, _, _ in rows]
    fig, ax = plt.subplots(figsize=(8, max(2.0, 0.32 * len(rows) + 0.8)))
    y = range(len(rows))
    ax.barh(y, values, color="tab:blue")
    ax.set_yticks(list(y))
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("value")
    ax.set_xlim(0, max(1.0, max(values) * 1.05))
    for yi, v in zip(y, values):
        ax.text(v, yi, f" {v:.4f}", va="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
