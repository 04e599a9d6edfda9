"""Memory-aware multi-speaker embedding retrieval.

Per-speaker pooled features query a bank of speaker-embedding basis
vectors.  Two retrieval heads are provided: the deep interactive module
(stacked dot-product cross-attentions) and the older additive-attention
lookup kept as a baseline.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError
from .numcore import Tensor, as_tensor, ops
from .numcore.nn import Linear, Module, glorot, param


def select_features(fp, mask) -> Tensor:
    """Masked time-average of frame features for each speaker.

    fp: (..., T, D) features; mask: (..., N, T) of {0, 1}.  Speakers with
    an empty mask row get a zero vector.
    """
    fp = as_tensor(fp)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=fp.data.dtype)
    if m.shape[-1] != fp.shape[-2]:
        raise DimensionError(f"mask covers {m.shape[-1]} frames, features have {fp.shape[-2]}")
    counts = np.maximum(1.0, m.sum(axis=-1, keepdims=True))
    return ops.matmul(m / counts, fp)


def _logit_scale(d_m: int) -> float:
    return 1.0 / math.sqrt(d_m)


def dim_cross_attention(query, keysrc, wq, wk, prior=None) -> tuple[Tensor, Tensor]:
    """softmax((query Wq)(keysrc Wk)^T / sqrt(d_m) + prior) keysrc.

    query: (..., 1, D); keysrc: (..., K, D_M); Wq: (D, d_m); Wk: (D_M, d_m);
    prior: optional log-weights (..., 1, K) carried from an earlier attention.
    Returns the retrieved row (..., 1, D_M) and the logits (..., 1, K).
    """
    q = ops.matmul(query, wq)
    k = ops.matmul(keysrc, wk)
    d_m = wq.shape[-1]
    logits = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), _logit_scale(d_m))
    if prior is not None:
        logits = ops.add(logits, prior)
    return ops.matmul(ops.softmax(logits, axis=-1), keysrc), logits


def top_rows(rows, logits, top_r: int) -> tuple[Tensor, Tensor]:
    """Keep the ``top_r`` highest-scoring key rows with their log-weights.

    rows: (..., K, D_M); logits: (..., 1, K).  Returns the kept rows
    (..., R, D_M) and their renormalized log-weights (..., 1, R).
    """
    rows, logits = as_tensor(rows), as_tensor(logits)
    K = rows.shape[-2]
    R = min(top_r, K)
    if R < K:
        order = np.argsort(-logits.data, axis=-1, kind="stable")[..., 0, :R]  # (..., R)
        sel = np.zeros(order.shape + (K,), dtype=logits.data.dtype)
        np.put_along_axis(sel, order[..., None], 1.0, axis=-1)
        rows = ops.matmul(sel, rows)
        logits = ops.matmul(logits, ops.swapaxes(as_tensor(sel), -1, -2))
    return rows, ops.log_softmax(logits, axis=-1)


class DimBlock(Module):
    """Two stacked cross-attentions from a speaker's pooled features.

    The first attends over the incoming key rows; its best ``top_r`` rows,
    weighted by that attention, form the context the second attends over.
    The second attention's weights are passed on as the next block's prior,
    so every output stays a convex combination of the memory rows.
    """

    def __init__(self, d: int, d_mem: int, rng: np.random.Generator, top_r: int = 8):
        self.w1q = glorot(rng, d, d)
        self.w1k = glorot(rng, d_mem, d)
        self.w2q = glorot(rng, d, d)
        self.w2k = glorot(rng, d_mem, d)
        self.top_r = top_r

    def __call__(self, fs, keys, prior=None) -> tuple[Tensor, Tensor, Tensor]:
        _, z1 = dim_cross_attention(fs, keys, self.w1q, self.w1k, prior)
        ctx, ctx_prior = top_rows(keys, z1, self.top_r)
        h2, z2 = dim_cross_attention(fs, ctx, self.w2q, self.w2k, ctx_prior)
        return h2, ctx, ops.log_softmax(z2, axis=-1)


class DeepInteractiveModule(Module):
    def __init__(self, d: int, d_mem: int, rng: np.random.Generator, n_blocks: int = 3, top_r: int = 8):
        self.blocks = [DimBlock(d, d_mem, rng, top_r) for _ in range(n_blocks)]

    def __call__(self, fs, memory) -> Tensor:
        """fs: (..., N, D) pooled features; memory: (K, D_M).  Returns (..., N, D_M)."""
        fs = as_tensor(fs)
        q = ops.reshape(fs, fs.shape[:-1] + (1, fs.shape[-1]))
        keys, prior, out = as_tensor(memory), None, None
        for blk in self.blocks:
            out, keys, prior = blk(q, keys, prior)
        return ops.reshape(out, fs.shape[:-1] + (out.shape[-1],))


class AdditiveRetrieval(Module):
    """score_k = v . tanh(Wf f + Wm m_k + b); output = softmax(score) M."""

    def __init__(self, d: int, d_mem: int, rng: np.random.Generator, d_att: int | None = None):
        d_att = d_att or d
        self.wf = glorot(rng, d, d_att)
        self.wm = glorot(rng, d_mem, d_att)
        self.b = param(np.zeros(d_att))
        self.v = glorot(rng, d_att, 1)

    def weights(self, fs, memory) -> Tensor:
        fs = as_tensor(fs)
        f = ops.matmul(fs, self.wf)  # (..., N, A)
        m = ops.matmul(as_tensor(memory), self.wm)  # (K, A)
        f = ops.reshape(f, f.shape[:-1] + (1, f.shape[-1]))  # (..., N, 1, A)
        hid = ops.tanh(ops.add(ops.add(f, m), self.b))  # (..., N, K, A)
        scores = ops.matmul(hid, self.v)  # (..., N, K, 1)
        scores = ops.reshape(scores, scores.shape[:-1])
        return ops.softmax(scores, axis=-1)

    def __call__(self, fs, memory) -> Tensor:
        return ops.matmul(self.weights(fs, memory), as_tensor(memory))


class Mamse(Module):
    """One memory bank and its retrieval head."""

    def __init__(self, d: int, d_mem: int, rng: np.random.Generator, retrieval: str = "dim", top_r: int = 8):
        self.retrieval = retrieval
        if retrieval == "dim":
            self.head = DeepInteractiveModule(d, d_mem, rng, top_r=top_r)
        elif retrieval == "additive":
            self.head = AdditiveRetrieval(d, d_mem, rng)
        else:
            raise ValueError(f"unknown retrieval {retrieval!r}")

    def __call__(self, fs, memory) -> Tensor:
        return self.head(fs, memory)


class Aggregator(Module):
    """Concatenate retrieved embeddings with the i-vector rows, then project to D."""

    def __init__(self, d_in: int, d: int, rng: np.random.Generator):
        self.proj = Linear(d_in, d, rng)

    def __call__(self, *parts) -> Tensor:
        parts = [as_tensor(p) for p in parts]
        rows = {p.shape[-2] for p in parts}
        if len(rows) != 1:
            raise DimensionError(f"speaker row counts differ: {[p.shape for p in parts]}")
        return self.proj(ops.concat(parts, axis=-1))
