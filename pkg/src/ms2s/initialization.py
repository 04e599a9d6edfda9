"""Clustering-based initialization: segment embeddings, spectral clustering,
speaker masks and memory banks of embedding cluster centers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import FormatError, InputError
from .features import LOG_FLOOR, FeatureMatrix
from .storage import atomic_open, read_memory_bank, write_memory_bank


@dataclass
class SegmentEmbedding:
    start_s: float
    end_s: float
    vector: np.ndarray

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise InputError(f"segment end {self.end_s} must exceed start {self.start_s}")


@dataclass
class SpeakerMask:
    mask: np.ndarray  # (N, T) of {0, 1}
    frame_hop_s: float = 0.01

    @property
    def N(self) -> int:
        return self.mask.shape[0]

    @property
    def T(self) -> int:
        return self.mask.shape[1]


@dataclass
class MemoryBank:
    vectors: np.ndarray  # (K, D_M), rows L2-normalized
    kind: str = "xvector"

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        write_memory_bank(path, self.vectors)

    @classmethod
    def load(cls, path, kind: str = "xvector") -> "MemoryBank":
        return cls(read_memory_bank(path), kind)


class EmbeddingProvider(Protocol):
    """Maps a block of feature frames (n, F) to one speaker embedding."""

    dim: int

    def embed(self, frames: np.ndarray) -> np.ndarray: ...


class ToyEmbedder:
    """Mean and std of each feature dim, pushed through a fixed random map.

    Stands in for a pretrained x-vector extractor so the pipeline runs with
    no external models.  Same ``seed`` and ``dim`` give the same map.
    """

    def __init__(self, dim: int = 64, n_feats: int = 40, seed: int = 0):
        self.dim = dim
        self.n_feats = n_feats
        rng = np.random.default_rng([seed, dim, n_feats])
        self.projection = rng.normal(size=(2 * n_feats, dim)) / math.sqrt(2 * n_feats)

    def stats(self, frames: np.ndarray) -> np.ndarray:
        return np.concatenate([frames.mean(axis=0), frames.std(axis=0)])

    def embed(self, frames: np.ndarray) -> np.ndarray:
        return self.stats(frames) @ self.projection


def window_frames(T: int, window_s: float, hop_s: float, frame_hop_s: float) -> list[tuple[int, int]]:
    """Fixed-length analysis windows; a last window is aligned to the end."""
    win = int(round(window_s / frame_hop_s))
    hop = max(1, int(round(hop_s / frame_hop_s)))
    if win > T:
        raise InputError(f"window of {win} frames exceeds recording of {T} frames")
    spans = [(s, s + win) for s in range(0, T - win + 1, hop)]
    if spans[-1][1] < T:
        spans.append((T - win, T))
    return spans


def toy_embed(
    fm: FeatureMatrix,
    window_s: float = 1.0,
    hop_s: float = 0.5,
    provider: EmbeddingProvider | None = None,
) -> list[SegmentEmbedding]:
    if window_s < 0.5:
        raise InputError(f"embedding window {window_s}s is shorter than 0.5s")
    provider = provider or ToyEmbedder(n_feats=fm.F)
    out = []
    for a, b in window_frames(fm.T, window_s, hop_s, fm.frame_hop_s):
        vec = provider.embed(fm.frames[a:b])
        if not np.linalg.norm(vec) > 0:
            vec = vec + 1e-12
        out.append(SegmentEmbedding(a * fm.frame_hop_s, b * fm.frame_hop_s, vec))
    return out


# -- k-means ------------------------------------------------------------------


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sqdist(x, c):
    return np.maximum((x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def kmeans(
    x: np.ndarray,
    k: int,
    n_init: int = 50,
    max_iter: int = 300,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Returns (centers, labels, inertia).  Inertia is checked to be
    non-increasing at every iteration of every restart.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) < k:
        raise InputError(f"{len(x)} points cannot form {k} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        c = _kmeanspp(x, k, rng)
        prev_inertia = math.inf
        labels = None
        for _ in range(max_iter):
            d = _sqdist(x, c)
            new_labels = d.argmin(axis=1)
            inertia = float(d[np.arange(len(x)), new_labels].sum())
            if inertia > prev_inertia * (1 + 1e-12) + 1e-12:
                raise RuntimeError(f"k-means inertia increased: {prev_inertia} -> {inertia}")
            prev_inertia = inertia
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                members = x[labels == j]
                if len(members):
                    c[j] = members.mean(axis=0)
                else:
                    # empty cluster: steal the point farthest from its center
                    far = int(d[np.arange(len(x)), labels].argmax())
                    c[j] = x[far]
        if best is None or prev_inertia < best[2]:
            best = (c.copy(), labels.copy(), prev_inertia)
    return best


# -- spectral clustering --------------------------------------------------------


def cosine_affinity(v: np.ndarray) -> np.ndarray:
    u = v / np.linalg.norm(v, axis=1, keepdims=True)
    return np.clip(u @ u.T, 0.0, 1.0)


def binarize_affinity(a: np.ndarray, p: float = 0.95, min_neighbors: int = 10) -> np.ndarray:
    """Keep each row's entries at or above its p-percentile, as 1s; symmetrize.

    At least ``min_neighbors`` (capped at n) entries survive per row.
    """
    n = len(a)
    keep = min(n, max(int(math.ceil((1.0 - p) * n)), min_neighbors))
    out = np.zeros_like(a)
    order = np.argsort(-a, axis=1, kind="stable")[:, :keep]
    np.put_along_axis(out, order, 1.0, axis=1)
    return 0.5 * (out + out.T)


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(a)) - inv[:, None] * a * inv[None, :]


def spectral_cluster(
    embs: Sequence[SegmentEmbedding] | np.ndarray,
    n_speakers: int | None = None,
    p: float = 0.95,
    max_speakers: int = 8,
    min_neighbors: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """Cluster segment embeddings; returns one integer label per segment.

    Without ``n_speakers`` the count is the position of the largest gap
    among the smallest ``max_speakers`` Laplacian eigenvalues.
    """
    v = np.array([e.vector for e in embs]) if not isinstance(embs, np.ndarray) else embs
    if len(v) < 2:
        raise InputError("spectral clustering needs at least 2 embeddings")
    if n_speakers is not None and len(v) < n_speakers:
        raise InputError(f"{len(v)} embeddings cannot form {n_speakers} clusters")
    if n_speakers == 1:
        return np.zeros(len(v), dtype=int)
    lap = normalized_laplacian(binarize_affinity(cosine_affinity(v), p, min_neighbors))
    vals, vecs = np.linalg.eigh(lap)
    if n_speakers is None:
        m = min(max_speakers, len(vals))
        gaps = np.diff(vals[:m])
        n_speakers = int(np.argmax(gaps)) + 1 if len(gaps) else 1
        if n_speakers == 1:
            return np.zeros(len(v), dtype=int)
    _, labels, _ = kmeans(vecs[:, :n_speakers], n_speakers, seed=seed)
    return _canonical_labels(labels)


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Relabel so clusters are numbered by first appearance."""
    mapping: dict[int, int] = {}
    out = np.empty_like(labels)
    for i, lab in enumerate(labels):
        out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


# -- masks -----------------------------------------------------------------------


def energy_vad(fm: FeatureMatrix, threshold_db: float = -40.0) -> np.ndarray:
    """Frames whose Mel energy is within ``threshold_db`` of the loudest frame."""
    log_e = np.logaddexp.reduce(fm.frames, axis=1)
    db = 10.0 * log_e / math.log(10.0)
    return db >= db.max() + threshold_db


def labels_to_mask(
    labels: Sequence[int],
    embs: Sequence[SegmentEmbedding],
    T: int,
    frame_hop_s: float = 0.01,
    speech: np.ndarray | None = None,
    n_speakers: int | None = None,
) -> SpeakerMask:
    """Frame t is active for speaker n iff a segment labeled n covers it.

    ``speech`` (bool per frame) zeroes non-speech frames.
    """
    labels = np.asarray(labels, dtype=int)
    N = n_speakers if n_speakers is not None else int(labels.max()) + 1
    mask = np.zeros((N, T))
    for lab, e in zip(labels, embs):
        a = max(0, int(round(e.start_s / frame_hop_s)))
        b = min(T, int(round(e.end_s / frame_hop_s)))
        mask[lab, a:b] = 1.0
    if speech is not None:
        mask *= np.asarray(speech, dtype=bool)[None, :T]
    return SpeakerMask(mask, frame_hop_s)


def central_segments(embs: Sequence[SegmentEmbedding]) -> list[SegmentEmbedding]:
    """Trim each window to the span closer to its centre than to any neighbour's.

    The trimmed segments tile the timeline, so masks built from them are
    single-label per frame.
    """
    if not embs:
        return []
    centers = [0.5 * (e.start_s + e.end_s) for e in embs]
    cuts = [embs[0].start_s] + [0.5 * (a + b) for a, b in zip(centers, centers[1:])] + [embs[-1].end_s]
    return [SegmentEmbedding(a, b, e.vector) for a, b, e in zip(cuts, cuts[1:], embs) if b > a]


def speaker_profiles(
    fm: FeatureMatrix,
    mask: np.ndarray,
    provider: EmbeddingProvider,
) -> np.ndarray:
    """Per-speaker embedding of the frames the mask selects (zero row if none)."""
    out = np.zeros((mask.shape[0], provider.dim))
    for n, row in enumerate(mask.astype(bool)):
        if row.sum() >= 2:
            v = provider.embed(fm.frames[row[: fm.T]])
            norm = np.linalg.norm(v)
            out[n] = v / norm if norm > 0 else v
    return out


def build_memory(pool: Sequence[SegmentEmbedding] | np.ndarray, K: int, kind: str = "xvector", seed: int = 0) -> MemoryBank:
    """K-means cluster centers of an embedding pool, rows L2-normalized."""
    v = np.array([e.vector for e in pool]) if not isinstance(pool, np.ndarray) else pool
    if len(v) < K:
        raise InputError(f"pool of {len(v)} embeddings is smaller than K={K}")
    centers, _, _ = kmeans(v, K, seed=seed)
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    return MemoryBank(centers / np.where(norms > 0, norms, 1.0), kind)


# -- CSV import -------------------------------------------------------------------


def read_embeddings_csv(path) -> list[SegmentEmbedding]:
    """Rows of start,end,v0..v{D-1}; a non-numeric first row is a header."""
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError as exc:
                if lineno == 1:
                    continue
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if len(vals) < 3:
                raise FormatError(f"{path}:{lineno}: need start,end and at least one value")
            out.append(SegmentEmbedding(vals[0], vals[1], np.array(vals[2:])))
    return out


def write_embeddings_csv(path, embs: Sequence[SegmentEmbedding]) -> None:
    with atomic_open(Path(path), "w") as fh:
        w = csv.writer(fh)
        dim = len(embs[0].vector) if embs else 0
        w.writerow(["start", "end"] + [f"v{i}" for i in range(dim)])
        for e in embs:
            w.writerow([f"{e.start_s:.3f}", f"{e.end_s:.3f}"] + [repr(float(x)) for x in e.vector])


def floor_embedding(provider: ToyEmbedder) -> np.ndarray:
    """Embedding of an all-silent window."""
    stats = np.concatenate([np.full(provider.n_feats, math.log(LOG_FLOOR)), np.zeros(provider.n_feats)])
    return stats @ provider.projection
