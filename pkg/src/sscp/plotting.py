"""Figures written next to the CSV outputs of the command-line tools."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss(iters: Sequence[int], loss: Sequence[float], f1: Sequence[float | None], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(iters, loss, color="tab:blue", lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("BCE loss", color="tab:blue")
    ax.set_yscale("log")
    twin = ax.twinx()
    pts = [(i, v) for i, v in zip(iters, f1) if v is not None]
    if pts:
        xs, ys = zip(*pts)
        twin.plot(xs, ys, color="tab:orange", lw=1, alpha=0.8)
    twin.set_ylabel("batch F1", color="tab:orange")
    twin.set_ylim(0, 1)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_ablation(names: Sequence[str], f1: Sequence[float | None], iou: Sequence[float | None],
                  path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(names)), 3.8))
    pos = range(len(names))
    width = 0.4
    ax.bar([p - width / 2 for p in pos], [100 * (v or 0) for v in f1], width, label="F1")
    ax.bar([p + width / 2 for p in pos], [100 * (v or 0) for v in iou], width, label="IoU")
    ax.set_xticks(list(pos))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_costs(names: Sequence[str], params: Sequence[int], flops: Sequence[int], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(7, 3))
    for ax, vals, label in zip(axes, (params, flops), ("parameters", "FLOPs")):
        ax.bar(names, vals, color="tab:gray")
        ax.set_title(label)
        ax.tick_params(axis="x", labelsize=8)
    return _save(fig, path)
