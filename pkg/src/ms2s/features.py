"""WAV input and log-Mel filter-bank extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import FormatError, InputError
from .storage import atomic_open, read_feature_cache, write_feature_cache

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
PREEMPH = 0.97


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise InputError(f"sample rate {self.sample_rate} Hz unsupported (need {SAMPLE_RATE})")
        if len(self.samples) == 0:
            raise InputError("empty audio clip")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, F)
    frame_hop_s: float = 0.01

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def F(self) -> int:
        return self.frames.shape[1]


def read_wav(path, channel: int = 0) -> AudioClip:
    """Load PCM16 or float32 WAV; ``channel`` picks one column of multi-channel files."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        if not 0 <= channel < samples.shape[1]:
            raise InputError(f"{path}: channel {channel} out of range ({samples.shape[1]} channels)")
        samples = samples[:, channel]
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, pcm16: bool = True) -> None:
    if pcm16:
        data = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = clip.samples.astype(np.float32)
    with atomic_open(path) as fh:
        wavfile.write(fh, clip.sample_rate, data)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = 40, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return pts[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters (n_mels, n_fft//2+1) spanning 0 Hz to Nyquist."""
    pts = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.linspace(0.0, sample_rate / 2, n_fft // 2 + 1)
    lo, ce, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (ce - lo)
    down = (hi - freqs) / (hi - ce)
    return np.maximum(0.0, np.minimum(up, down))


def n_frames(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


def fbank(
    clip: AudioClip,
    n_mels: int = 40,
    win_s: float = 0.025,
    hop_s: float = 0.010,
    target_frames: int | None = None,
) -> FeatureMatrix:
    """Log-Mel filter-bank energies, one row per 10 ms frame.

    The trailing partial window is dropped.  With ``target_frames`` the
    result is reflect-padded (or truncated) to exactly that many frames.
    """
    sr = clip.sample_rate
    win = int(round(win_s * sr))
    hop = int(round(hop_s * sr))
    x = np.asarray(clip.samples, dtype=np.float64)
    if len(x) < win:
        raise InputError(f"clip of {len(x)} samples is shorter than one {win}-sample window")
    T = n_frames(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:T]
    emph = np.empty_like(frames)
    emph[:, 1:] = frames[:, 1:] - PREEMPH * frames[:, :-1]
    emph[:, 0] = frames[:, 0] * (1.0 - PREEMPH)
    n_fft = 1 << (win - 1).bit_length()
    spec = np.fft.rfft(emph * get_window("hann", win), n=n_fft)
    power = spec.real**2 + spec.imag**2
    mel = power @ mel_filterbank(n_mels, n_fft, sr).T
    out = np.log(np.maximum(mel, LOG_FLOOR))
    fm = FeatureMatrix(out, hop / sr)
    return pad_frames(fm, target_frames) if target_frames is not None else fm


def pad_frames(fm: FeatureMatrix, target: int) -> FeatureMatrix:
    """Reflect-pad or truncate along time to exactly ``target`` frames."""
    T = fm.T
    if target <= T:
        return FeatureMatrix(fm.frames[:target].copy(), fm.frame_hop_s)
    mode = "reflect" if T > 1 and target - T < T else "edge"
    return FeatureMatrix(np.pad(fm.frames, ((0, target - T), (0, 0)), mode=mode), fm.frame_hop_s)


def standardize(fm: FeatureMatrix) -> FeatureMatrix:
    """Per-dimension zero mean / unit variance over time; flat dims become 0."""
    x = fm.frames
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    safe = np.where(sd > 1e-12, sd, 1.0)
    out = np.where(sd > 1e-12, (x - mu) / safe, 0.0)
    return FeatureMatrix(out, fm.frame_hop_s)


def save_features(path, fm: FeatureMatrix) -> None:
    write_feature_cache(path, fm.frames, int(round(fm.frame_hop_s * 1000)))


def load_features(path) -> FeatureMatrix:
    frames, hop_ms = read_feature_cache(path)
    return FeatureMatrix(frames, hop_ms / 1000.0)
