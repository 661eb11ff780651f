"""Figure rendering for training curves and sweep tables (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_loss_curve(curve: Sequence[tuple[int, float]], path: str | Path, title: str = "training loss") -> Path:
    path = Path(path)
    steps = [s for s, _ in curve]
    values = [v for _, v in curve]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, values, lw=0.8, alpha=0.5, label="per step")
    window = max(1, len(values) // 60)
    if window > 1:
        smooth = [sum(values[max(0, i - window):i + 1]) / len(values[max(0, i - window):i + 1]) for i in range(len(values))]
        ax.plot(steps, smooth, lw=1.8, label=f"{window}-step mean")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("negative log likelihood")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_sweep_bars(rows: Sequence[dict], path: str | Path, title: str = "per-domain sweep") -> Path:
    """Stacked substitution/insertion/deletion rate bars, one per sweep cell."""
    path = Path(path)
    done = [r for r in rows if r.get("status") == "ok"]
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(done) + 2), 4))
    if done:
        labels = [r["cell_id"] for r in done]
        ref = [max(1, r["reference_tokens"]) for r in done]
        subs = [r["substitutions"] / n for r, n in zip(done, ref)]
        ins = [r["insertions"] / n for r, n in zip(done, ref)]
        dels = [r["deletions"] / n for r, n in zip(done, ref)]
        x = range(len(done))
        ax.bar(x, subs, label="substitutions")
        ax.bar(x, ins, bottom=subs, label="insertions")
        ax.bar(x, dels, bottom=[a + b for a, b in zip(subs, ins)], label="deletions")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.legend(frameon=False)
    ax.set_ylabel("token error rate")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
