"""Whole-recording decoding: overlapping chunks, channel fusion,
binarization and iterative refinement of the speaker masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .errors import DimensionError, InputError
from .features import FeatureMatrix
from .model import NSDModel
from .numcore import no_grad
from .pipeline import chunk_starts
from .scoring import RttmSegment, der, mask_to_segments


@dataclass
class ChunkPlan:
    T: int
    length: int
    overlap: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise InputError(f"overlap {self.overlap} must be in [0, 1)")

    @property
    def hop(self) -> int:
        return max(1, self.length - int(round(self.overlap * self.length)))

    @property
    def spans(self) -> list[tuple[int, int]]:
        return [(a, a + self.length) for a in chunk_starts(self.T, self.length, self.hop)]


def stitch(blocks: Sequence[np.ndarray], spans: Sequence[tuple[int, int]], T: int) -> np.ndarray:
    """Average (N, L) chunk posteriors onto a (N, T) timeline; frames past T are dropped."""
    N = blocks[0].shape[0]
    acc = np.zeros((N, max(T, max(b for _, b in spans))))
    cnt = np.zeros(acc.shape[1])
    for blk, (a, b) in zip(blocks, spans):
        acc[:, a:b] += blk
        cnt[a:b] += 1
    return acc[:, :T] / cnt[:T]


def decode_channel(
    model: NSDModel,
    fm: FeatureMatrix,
    S: np.ndarray,
    ivec: np.ndarray,
    mem_x: np.ndarray,
    mem_i: np.ndarray,
    overlap: float = 0.25,
    batch_size: int = 8,
) -> np.ndarray:
    """(N, T) posteriors for one channel; overlapping chunk outputs are averaged."""
    L = model.cfg.t_out
    T = fm.T
    if S.shape[1] != T:
        raise DimensionError(f"mask has {S.shape[1]} frames, features have {T}")
    X, M = fm.frames, S
    if T < L:
        X = np.pad(X, ((0, L - T), (0, 0)), mode="edge")
        M = np.pad(M, ((0, 0), (0, L - T)))
    plan = ChunkPlan(max(T, L), L, overlap)
    spans = plan.spans
    was = model.training
    model.eval()
    blocks = []
    with no_grad():
        for i in range(0, len(spans), batch_size):
            part = spans[i : i + batch_size]
            xb = np.stack([X[a:b] for a, b in part])
            sb = np.stack([M[:, a:b] for a, b in part])
            ib = np.broadcast_to(ivec, (len(part),) + ivec.shape)
            blocks += list(model(xb, sb, ib, mem_x, mem_i).data.astype(np.float64))
    model.train(was)
    return stitch(blocks, spans, T)


def fuse_channels(posteriors: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of per-channel posterior matrices."""
    if not posteriors:
        raise InputError("no channels to fuse")
    shapes = {p.shape for p in posteriors}
    if len(shapes) != 1:
        raise DimensionError(f"channel posteriors differ in shape: {sorted(shapes)}")
    return np.mean(np.stack(posteriors), axis=0)


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    d = np.diff(np.concatenate([[0], row.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def binarize(
    y_hat: np.ndarray,
    threshold: float = 0.5,
    median_win: int = 11,
    min_seg_s: float = 0.2,
    min_gap_s: float = 0.1,
    frame_hop_s: float = 0.01,
) -> np.ndarray:
    """Threshold, median-filter, drop short segments, then close short gaps.

    Returns a binary (N, T) mask.
    """
    y_hat = np.asarray(y_hat)
    out = np.zeros(y_hat.shape)
    min_seg = int(round(min_seg_s / frame_hop_s))
    min_gap = int(round(min_gap_s / frame_hop_s))
    for n, row in enumerate(y_hat > threshold):
        if median_win > 1:
            row = median_filter(row.astype(np.uint8), size=median_win, mode="nearest").astype(bool)
        runs = [(a, b) for a, b in _runs(row) if b - a >= min_seg]
        merged: list[list[int]] = []
        for a, b in runs:
            if merged and a - merged[-1][1] < min_gap:
                merged[-1][1] = b
            else:
                merged.append([a, b])
        for a, b in merged:
            out[n, a:b] = 1.0
    return out


@dataclass
class DiarizationResult:
    posteriors: np.ndarray
    mask: np.ndarray
    segments: list[RttmSegment]
    iteration_der: list[float] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)


def iterate(
    model: NSDModel,
    channels: Sequence[FeatureMatrix],
    init_mask: np.ndarray,
    profile_fn: Callable[[FeatureMatrix, np.ndarray], np.ndarray],
    mem_x: np.ndarray,
    mem_i: np.ndarray,
    n_iters: int = 2,
    rec_id: str = "rec",
    labels: Sequence[str] | None = None,
    reference: Sequence[RttmSegment] | None = None,
    collar: float = 0.25,
    overlap: float = 0.25,
    post: dict | None = None,
) -> DiarizationResult:
    """Decode ``n_iters`` times, each pass seeded with the previous binarized mask.

    ``profile_fn(fm, mask)`` recomputes the per-speaker i-vector rows from
    the current mask before every pass.  With ``reference`` the DER of each
    pass is recorded.
    """
    if n_iters < 1:
        raise InputError("n_iters must be at least 1")
    post = post or {}
    S = np.asarray(init_mask, dtype=float)
    ders, masks = [], []
    for _ in range(n_iters):
        per_ch = [decode_channel(model, fm, S, profile_fn(fm, S), mem_x, mem_i, overlap) for fm in channels]
        y = fuse_channels(per_ch)
        S = binarize(y, frame_hop_s=channels[0].frame_hop_s, **post)
        masks.append(S)
        segs = mask_to_segments(S, channels[0].frame_hop_s, rec_id, labels)
        if reference is not None:
            ders.append(der(reference, segs, collar).der)
    return DiarizationResult(y, S, segs, ders, masks)
