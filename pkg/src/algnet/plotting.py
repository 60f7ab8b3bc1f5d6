"""Matplotlib figures written next to the text reports (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def loss_curve(steps: Sequence[int], losses: Sequence[float], lrs: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, lw=1, color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss", color="tab:blue")
    ax.set_yscale("log")
    lr_ax = ax.twinx()
    lr_ax.plot(steps, lrs, lw=1, color="tab:orange")
    lr_ax.set_ylabel("learning rate", color="tab:orange")
    return _save(fig, path)


def metric_bars(ids: Sequence[str], restored: Sequence[float], baseline: Sequence[float] | None, path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(ids) + 2), 3.5))
    xs = range(len(ids))
    width = 0.4 if baseline is not None else 0.8
    ax.bar([x - width / 2 if baseline is not None else x for x in xs], restored, width, label="restored")
    if baseline is not None:
        ax.bar([x + width / 2 for x in xs], baseline, width, label="degraded input")
        ax.legend()
    ax.set_xticks(list(xs))
    ax.set_xticklabels(ids, rotation=45, ha="right")
    ax.set_ylabel("PSNR (dB)")
    return _save(fig, path)


def bench_times(timings: Mapping[str, tuple[Sequence[int], Sequence[float]]], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, (ks, secs) in timings.items():
        ax.plot(ks, secs, marker="o", label=mode)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length k")
    ax.set_ylabel("seconds (min over repeats)")
    ax.legend()
    return _save(fig, path)


def activation_bars(values: Sequence[float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.15 * len(values) + 2), 3))
    ax.bar(range(len(values)), values, color="tab:green")
    ax.set_xlabel("channel")
    ax.set_ylabel("mean ReLU activation")
    if title:
        ax.set_title(title)
    return _save(fig, path)
