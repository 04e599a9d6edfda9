"""Cost of each inference stage as the decoded duration T grows.

Peak transient allocation is the tracemalloc peak above the allocation
level at the start of the call; time is the best of a few repeats with
tracing off.
"""

from __future__ import annotations

import csv
import io
import time
import tracemalloc
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from .features import FeatureMatrix
from .inference import decode_channel
from .model import ModelConfig, NSDModel
from .numcore import no_grad

CSV_FIELDS = ["stage", "T", "N", "ms", "peak_bytes"]


def measure(fn: Callable[[], object], repeats: int = 3) -> tuple[float, int]:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        fn()
        peak = tracemalloc.get_traced_memory()[1] - base
    finally:
        tracemalloc.stop()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0, int(peak)


def run(Ts: Sequence[int], N: int = 2, cfg: ModelConfig | None = None, seed: int = 0, repeats: int = 3, K: int = 32) -> list[dict]:
    """Rows of stage, T, N, ms, peak_bytes for stages encoder, decoder and total.

    ``decoder`` runs one decode of a T-frame window (output layer sized to
    T).  ``total`` decodes a T-frame recording in fixed-length chunks with
    the model as configured.
    """
    cfg = cfg or ModelConfig.desk(n_max=max(4, N), dropout=0.0)
    rng = np.random.default_rng(seed)
    mem_x = rng.normal(size=(K, cfg.xvec_dim))
    mem_i = rng.normal(size=(K, cfg.ivec_dim))
    chunked = NSDModel(cfg).eval()
    rows = []
    for T in Ts:
        model = NSDModel(replace(cfg, t_out=T)).eval()
        X = rng.normal(size=(1, T, cfg.n_feats))
        S = (rng.random((1, N, T)) > 0.5).astype(float)
        iv = rng.normal(size=(1, N, cfg.ivec_dim))
        with no_grad():
            fp, enc = model.encode(X)
            ea = model.speaker_embeddings(fp, S, iv, mem_x, mem_i)
            stages = {
                "encoder": lambda: model.encode(X),
                "decoder": lambda: model.decode(ea, enc),
                "total": lambda: decode_channel(chunked, FeatureMatrix(X[0]), S[0], iv[0], mem_x, mem_i),
            }
            for name, fn in stages.items():
                ms, peak = measure(fn, repeats)
                rows.append({"stage": name, "T": T, "N": N, "ms": ms, "peak_bytes": peak})
    return rows


def to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "ms": f"{r['ms']:.3f}"})
    return buf.getvalue()


def linear_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares line."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - (resid @ resid) / ss_tot if ss_tot > 0 else 1.0


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def stage(rows: Sequence[dict], name: str) -> tuple[list[int], list[float], list[int]]:
    sel = sorted((r for r in rows if r["stage"] == name), key=lambda r: r["T"])
    return [r["T"] for r in sel], [r["ms"] for r in sel], [r["peak_bytes"] for r in sel]
