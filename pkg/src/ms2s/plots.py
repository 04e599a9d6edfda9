"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.stem}.tmp{path.suffix}")
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    tmp.replace(path)
    return path


def der_bars(reports: Mapping[str, object], path) -> Path:
    """Per-recording DER split into miss / false alarm / confusion."""
    names = list(reports)
    miss = np.array([reports[n].miss_s / reports[n].ref_s for n in names]) * 100
    fa = np.array([reports[n].fa_s / reports[n].ref_s for n in names]) * 100
    conf = np.array([reports[n].conf_s / reports[n].ref_s for n in names]) * 100
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names) + 2), 3.5))
    x = np.arange(len(names))
    ax.bar(x, miss, label="miss")
    ax.bar(x, fa, bottom=miss, label="false alarm")
    ax.bar(x, conf, bottom=miss + fa, label="confusion")
    ax.set_xticks(x, names, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("DER (%)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def bench_scaling(rows: Sequence[dict], path) -> Path:
    """Log-log cost against T for each stage: time and peak allocation."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    for stage in sorted({r["stage"] for r in rows}):
        sel = sorted((r for r in rows if r["stage"] == stage), key=lambda r: r["T"])
        T = [r["T"] for r in sel]
        axes[0].loglog(T, [r["ms"] for r in sel], "o-", label=stage)
        axes[1].loglog(T, [max(r["peak_bytes"], 1) for r in sel], "o-", label=stage)
    axes[0].set_ylabel("time (ms)")
    axes[1].set_ylabel("peak allocation (bytes)")
    for ax in axes:
        ax.set_xlabel("frames T")
        ax.legend(fontsize=7)
    return _save(fig, path)


def training_curves(history: Sequence[object], path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ep = [h.epoch for h in history]
    ax.plot(ep, [h.loss for h in history], "o-", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("BCE loss")
    ax2 = ax.twinx()
    ax2.plot(ep, [100 * h.train_der for h in history], "s--", color="tab:red", label="train DER")
    ax2.set_ylabel("train DER (%)")
    fig.legend(fontsize=7, loc="upper right")
    return _save(fig, path)


def posteriors(y: np.ndarray, mask: np.ndarray, path, frame_hop_s: float = 0.01, ref: np.ndarray | None = None) -> Path:
    N, T = y.shape
    fig, axes = plt.subplots(N, 1, figsize=(8, 1.2 * N + 0.5), sharex=True, squeeze=False)
    t = np.arange(T) * frame_hop_s
    for n, ax in enumerate(axes[:, 0]):
        ax.plot(t, y[n], lw=0.8, label="posterior")
        ax.fill_between(t, 0, mask[n], alpha=0.25, step="mid", label="decision")
        if ref is not None and n < len(ref):
            ax.plot(t, 1.05 * ref[n], lw=0.6, color="k", label="reference")
        ax.set_ylim(-0.05, 1.1)
        ax.set_ylabel(f"spk{n}")
    axes[-1, 0].set_xlabel("time (s)")
    axes[0, 0].legend(fontsize=6, loc="upper right")
    return _save(fig, path)
