"""Synthetic multi-speaker recordings with exact activity labels.

Each "speaker" is Gaussian noise shaped by a fixed spectral envelope of a
few formant-like bumps.  Activity follows a two-state Markov chain on a
coarse time grid; speakers are independent, so overlaps occur.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, AudioClip, hz_to_mel, mel_to_hz, write_wav
from .scoring import RttmSegment, mask_to_segments, write_rttm
from .storage import write_text_atomic


@dataclass
class ToySpeaker:
    name: str
    centers_hz: np.ndarray
    widths_mel: np.ndarray
    gains: np.ndarray

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        m = hz_to_mel(freqs)
        env = np.zeros_like(freqs, dtype=float)
        for c, w, g in zip(hz_to_mel(self.centers_hz), self.widths_mel, self.gains):
            env += g * np.exp(-0.5 * ((m - c) / w) ** 2)
        return env


def speaker_pool(n: int, rng: np.random.Generator) -> list[ToySpeaker]:
    """Speakers whose formant bumps are spread over disjoint slices of the Mel axis."""
    lo, hi = hz_to_mel(150.0), hz_to_mel(6500.0)
    out = []
    for i in range(n):
        k = 3
        # stratified bump positions so envelopes differ clearly between speakers
        slots = rng.permutation(3 * n)[:k]
        mels = lo + (hi - lo) * (slots + rng.uniform(0.2, 0.8, size=k)) / (3 * n)
        out.append(
            ToySpeaker(
                f"spk{i}",
                np.sort(mel_to_hz(mels)),
                rng.uniform(40.0, 90.0, size=k),
                rng.uniform(0.6, 1.0, size=k),
            )
        )
    return out


def markov_activity(n_steps: int, rng: np.random.Generator, p_stay: float = 0.9, p_start: float = 0.5) -> np.ndarray:
    """Two-state chain: keep the current state with probability ``p_stay``."""
    state = rng.random() < p_start
    out = np.empty(n_steps, dtype=bool)
    flips = rng.random(n_steps) >= p_stay
    for i in range(n_steps):
        if i and flips[i]:
            state = not state
        out[i] = state
    return out


def shaped_noise(spk: ToySpeaker, n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    spec *= spk.envelope(np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE))
    x = np.fft.irfft(spec, n)
    return x / (x.std() + 1e-12)


@dataclass
class ToyRecording:
    rec_id: str
    channels: list[np.ndarray]
    labels: np.ndarray  # (N, T) on the 10 ms frame grid
    speakers: list[str]
    frame_hop_s: float = 0.01

    def segments(self) -> list[RttmSegment]:
        return mask_to_segments(self.labels, self.frame_hop_s, self.rec_id, self.speakers)


def synth_recording(
    rec_id: str,
    speakers: list[ToySpeaker],
    duration_s: float,
    rng: np.random.Generator,
    n_channels: int = 1,
    grid_s: float = 0.25,
    p_stay: float = 0.9,
    noise_db: float = -30.0,
) -> ToyRecording:
    n = int(round(duration_s * SAMPLE_RATE))
    frames = int(round(duration_s / 0.01))
    steps = int(np.ceil(duration_s / grid_s))
    per_step = int(round(grid_s / 0.01))
    labels = np.zeros((len(speakers), frames))
    mix = np.zeros((n_channels, n))
    ramp = int(0.005 * SAMPLE_RATE)
    for k, spk in enumerate(speakers):
        act = np.repeat(markov_activity(steps, rng, p_stay), per_step)[:frames]
        labels[k] = act
        gate = np.repeat(act.astype(float), n // frames + 1)[:n]
        gate = np.convolve(gate, np.ones(ramp) / ramp, mode="same")  # click-free edges
        src = shaped_noise(spk, n, rng) * gate * 10 ** (rng.uniform(-3, 3) / 20)
        for c in range(n_channels):
            mix[c] += src * 10 ** (rng.uniform(-2, 2) / 20)
    chans = []
    for c in range(n_channels):
        x = mix[c] + 10 ** (noise_db / 20) * rng.normal(size=n)
        chans.append(0.3 * x / (np.abs(x).max() + 1e-12))
    return ToyRecording(rec_id, chans, labels, [s.name for s in speakers])


def make_corpus(
    n_recordings: int = 20,
    duration_s: float = 60.0,
    n_speakers: int = 2,
    n_channels: int = 1,
    pool_size: int = 8,
    seed: int = 0,
    **kw,
) -> list[ToyRecording]:
    """Recordings each drawing ``n_speakers`` distinct speakers from a shared pool."""
    if not 1 <= n_speakers <= pool_size:
        raise ValueError(f"n_speakers={n_speakers} must be in [1, pool_size={pool_size}]")
    rng = np.random.default_rng(seed)
    pool = speaker_pool(pool_size, rng)
    out = []
    for r in range(n_recordings):
        chosen = [pool[i] for i in sorted(rng.choice(pool_size, n_speakers, replace=False))]
        out.append(synth_recording(f"toy{r:03d}", chosen, duration_s, rng, n_channels, **kw))
    return out


def write_corpus(out_dir, recordings: list[ToyRecording]) -> None:
    """``<rec>_ch<k>.wav`` per channel, one ``reference.rttm`` and a manifest."""
    out = Path(out_dir)
    segs = []
    manifest = []
    for rec in recordings:
        for c, x in enumerate(rec.channels):
            write_wav(out / f"{rec.rec_id}_ch{c}.wav", AudioClip(x))
        segs += rec.segments()
        manifest.append({"rec_id": rec.rec_id, "channels": len(rec.channels), "speakers": rec.speakers})
    write_rttm(out / "reference.rttm", segs)
    write_text_atomic(out / "corpus.json", json.dumps(manifest, indent=1))
