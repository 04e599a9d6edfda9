"""Glue between audio, initialization and the network: per-recording
features, speaker profiles, memory banks and fixed-length training chunks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError
from .features import AudioClip, FeatureMatrix, fbank, pad_frames, standardize
from .initialization import (
    MemoryBank,
    ToyEmbedder,
    build_memory,
    central_segments,
    energy_vad,
    labels_to_mask,
    spectral_cluster,
    speaker_profiles,
    toy_embed,
)
from .model import NSDModel, load_checkpoint, save_checkpoint
from .scoring import RttmSegment
from .training import TrainExample


@dataclass
class Embedders:
    """Stand-ins for the x-vector (memory bank) and i-vector (profile) extractors."""

    xvec: ToyEmbedder
    ivec: ToyEmbedder

    @classmethod
    def create(cls, n_feats: int = 40, xvec_dim: int = 256, ivec_dim: int = 100, seed: int = 0) -> "Embedders":
        return cls(ToyEmbedder(xvec_dim, n_feats, seed=seed + 101), ToyEmbedder(ivec_dim, n_feats, seed=seed + 202))


def recording_features(samples: np.ndarray, n_mels: int = 40) -> FeatureMatrix:
    """Log-Mel features normalized per recording."""
    return standardize(fbank(AudioClip(samples), n_mels=n_mels))


def degrade_mask(Y: np.ndarray, flip: float, rng: np.random.Generator) -> np.ndarray:
    """Flip a fraction ``flip`` of the entries of a binary mask."""
    Y = np.asarray(Y) > 0
    return (Y ^ (rng.random(Y.shape) < flip)).astype(float)


def memory_banks(fms: Sequence[FeatureMatrix], emb: Embedders, K: int, window_s: float = 1.0, seed: int = 0):
    """k-means centers of windowed toy embeddings pooled over ``fms``."""
    xs, is_ = [], []
    for fm in fms:
        segs = toy_embed(fm, window_s, window_s, emb.xvec)
        xs += [s.vector for s in segs]
        is_ += [emb.ivec.embed(fm.frames[int(round(s.start_s / fm.frame_hop_s)) : int(round(s.end_s / fm.frame_hop_s))]) for s in segs]
    mem_x = build_memory(np.array(xs), K, "xvector", seed).vectors
    mem_i = build_memory(np.array(is_), K, "ivector", seed).vectors
    return mem_x, mem_i


def pad_speakers(S: np.ndarray, ivec: np.ndarray, n_slots: int):
    """Zero-pad speaker rows up to ``n_slots``; returns (S, ivec, slot mask)."""
    N = S.shape[0]
    if N > n_slots:
        raise ValueError(f"{N} speakers exceed {n_slots} slots")
    slots = np.concatenate([np.ones(N), np.zeros(n_slots - N)])
    S = np.vstack([S, np.zeros((n_slots - N, S.shape[1]))])
    ivec = np.vstack([ivec, np.zeros((n_slots - N, ivec.shape[1]))])
    return S, ivec, slots


def chunk_starts(T: int, length: int, hop: int) -> list[int]:
    """Window starts covering [0, T); the last window is end-aligned."""
    if T <= length:
        return [0]
    starts = list(range(0, T - length + 1, hop))
    if starts[-1] + length < T:
        starts.append(T - length)
    return starts


def chunk_examples(
    fm: FeatureMatrix,
    S: np.ndarray,
    Y: np.ndarray,
    ivec: np.ndarray,
    length: int,
    hop: int | None = None,
    rec_id: str = "",
    channel: int = 0,
) -> list[TrainExample]:
    """Cut a recording into ``length``-frame examples (short ones padded)."""
    hop = hop or length
    T = fm.T
    if T < length:
        fm = pad_frames(fm, length)
        S = np.pad(S, ((0, 0), (0, length - T)))
        Y = np.pad(Y, ((0, 0), (0, length - T)))
    out = []
    for a in chunk_starts(fm.T, length, hop):
        b = a + length
        out.append(TrainExample(fm.frames[a:b], S[:, a:b], Y[:, a:b], ivec, rec_id=rec_id, channel=channel))
    return out


class ChunkedCorpus(list):
    """Fixed-grid training chunks that can also be re-cut at random offsets.

    The list holds the grid chunks (used for evaluation).  ``resample``
    cuts every source recording again from a random start offset so that
    each epoch sees shifted windows; the chunk count stays about the same.
    """

    def __init__(self, items, sources, length: int):
        super().__init__(items)
        self.sources = sources  # (frames, S, Y, ivec, slots, rec_id, channel), padded to >= length
        self.length = length

    def resample(self, rng: np.random.Generator) -> list[TrainExample]:
        L = self.length
        out = []
        for frames, S, Y, iv, slots, rec_id, ch in self.sources:
            T = len(frames)
            first = int(rng.integers(0, min(L, T - L + 1)))
            for a in range(first, T - L + 1, L):
                out.append(TrainExample(frames[a : a + L], S[:, a : a + L], Y[:, a : a + L], iv, slots, ch, rec_id))
        return out


def profiles(fm: FeatureMatrix, S: np.ndarray, emb: Embedders) -> np.ndarray:
    """Per-speaker i-vector-like rows from the frames each mask row selects."""
    return speaker_profiles(fm, S, emb.ivec)


# -- corpus plumbing -------------------------------------------------------------


def discover_recordings(wav_dir, max_channels: int | None = None) -> dict[str, list[Path]]:
    """Group ``<rec>_ch<k>.wav`` (or bare ``<rec>.wav``) files by recording."""
    groups: dict[str, list[tuple[int, Path]]] = {}
    for p in sorted(Path(wav_dir).glob("*.wav")):
        m = re.fullmatch(r"(.+)_ch(\d+)", p.stem)
        rec, ch = (m.group(1), int(m.group(2))) if m else (p.stem, 0)
        groups.setdefault(rec, []).append((ch, p))
    out = {}
    for rec, items in sorted(groups.items()):
        paths = [p for _, p in sorted(items)]
        out[rec] = paths[:max_channels] if max_channels else paths
    return out


def labels_from_segments(segments: Sequence[RttmSegment], T: int, frame_hop_s: float = 0.01) -> tuple[np.ndarray, list[str]]:
    """(N, T) activity from RTTM segments; speakers ordered by first onset."""
    names: list[str] = []
    for s in sorted(segments, key=lambda s: (s.onset_s, s.speaker)):
        if s.speaker not in names:
            names.append(s.speaker)
    Y = np.zeros((len(names), T))
    for s in segments:
        a = max(0, int(round(s.onset_s / frame_hop_s)))
        b = min(T, int(round(s.end_s / frame_hop_s)))
        Y[names.index(s.speaker), a:b] = 1.0
    return Y, names


def clustering_init(
    fm: FeatureMatrix,
    emb: Embedders,
    n_speakers: int | None = None,
    max_speakers: int = 8,
    window_s: float = 1.0,
    hop_s: float = 0.5,
    vad_db: float = -40.0,
    seed: int = 0,
) -> np.ndarray:
    """Initial (N, T) mask: spectral clustering of windowed embeddings, VAD-gated."""
    segs = toy_embed(fm, window_s, hop_s, emb.xvec)
    labels = spectral_cluster(segs, n_speakers, max_speakers=max_speakers, seed=seed)
    N = n_speakers or int(labels.max()) + 1
    speech = energy_vad(fm, vad_db)
    return labels_to_mask(labels, central_segments(segs), fm.T, fm.frame_hop_s, speech, N).mask


def prepare_training(
    recordings: Sequence[tuple[str, Sequence[FeatureMatrix], np.ndarray]],
    emb: Embedders,
    length: int,
    n_slots: int,
    flip: float,
    memory_k: int,
    seed: int = 0,
    window_s: float = 1.0,
) -> tuple[ChunkedCorpus, np.ndarray, np.ndarray]:
    """Chunked examples with degraded oracle masks, plus the two memory banks.

    The examples come as a ``ChunkedCorpus`` so training can re-cut them at
    random offsets each epoch.

    ``recordings`` holds (rec_id, per-channel features, labels (N, T)).
    """
    rng = np.random.default_rng([seed, 17])
    examples, sources = [], []
    for rec_id, chans, Y in recordings:
        for c, fm in enumerate(chans):
            Yc = Y[:, : fm.T]
            if Yc.shape[1] < fm.T:
                Yc = np.pad(Yc, ((0, 0), (0, fm.T - Yc.shape[1])))
            S = degrade_mask(Yc, flip, rng)
            iv = profiles(fm, S, emb)
            S, iv, slots = pad_speakers(S, iv, n_slots)
            Yp = np.vstack([Yc, np.zeros((n_slots - len(Yc), fm.T))])
            for ex in chunk_examples(fm, S, Yp, iv, length, rec_id=rec_id, channel=c):
                ex.slots = slots
                examples.append(ex)
            pad = max(0, length - fm.T)
            sources.append((pad_frames(fm, max(length, fm.T)).frames, np.pad(S, ((0, 0), (0, pad))), np.pad(Yp, ((0, 0), (0, pad))), iv, slots, rec_id, c))
    mem_x, mem_i = memory_banks([fm for _, chans, _ in recordings for fm in chans[:1]], emb, memory_k, window_s, seed)
    return ChunkedCorpus(examples, sources, length), mem_x, mem_i


def save_bundle(path, model: NSDModel, mem_x: np.ndarray, mem_i: np.ndarray, extra: dict | None = None) -> None:
    """Checkpoint plus its memory banks, referenced from the manifest."""
    path = Path(path)
    xp, ip = path.with_name("xvector.mem"), path.with_name("ivector.mem")
    MemoryBank(mem_x, "xvector").save(xp)
    MemoryBank(mem_i, "ivector").save(ip)
    save_checkpoint(path, model, {"memory": {"xvector": xp.name, "ivector": ip.name}, **(extra or {})})


def load_bundle(path) -> tuple[NSDModel, np.ndarray, np.ndarray, dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint {path} not found")
    model, manifest = load_checkpoint(path)
    mem = manifest.get("memory")
    if not mem:
        raise InputError(f"checkpoint {path} names no memory banks")
    try:
        mem_x = MemoryBank.load(path.parent / mem["xvector"]).vectors
        mem_i = MemoryBank.load(path.parent / mem["ivector"]).vectors
    except FileNotFoundError as exc:
        raise InputError(f"memory bank missing: {exc.filename}") from exc
    return model, mem_x, mem_i, manifest
