"""Binary matrix files and atomic writes.

Feature caches, posterior dumps and memory banks share one layout: an
8-byte magic, a little-endian u32 header, then row-major little-endian
float32 values.
"""

from __future__ import annotations

import contextlib
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FormatError

FEATURE_MAGIC = b"MS2SFEAT"
POSTERIOR_MAGIC = b"MS2SPOST"
MEMORY_MAGIC = b"MS2SMEM\x00"
FORMAT_VERSION = 1


@contextlib.contextmanager
def atomic_open(path, mode: str = "wb"):
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    with atomic_open(path, "w") as fh:
        fh.write(text)


def _write_matrix(path, magic: bytes, extra: tuple[int, ...], mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(mat, dtype="<f4")
    with atomic_open(path) as fh:
        fh.write(magic)
        fh.write(struct.pack("<" + "I" * (1 + len(extra)), FORMAT_VERSION, *extra))
        fh.write(mat.tobytes())


def _read_matrix(path, magic: bytes, n_fields: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    head = 8 + 4 * (1 + n_fields)
    if len(raw) < head or raw[:8] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    version, *fields = struct.unpack("<" + "I" * (1 + n_fields), raw[8:head])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rows, cols = fields[0], fields[1]
    body = raw[head:]
    if len(body) != 4 * rows * cols:
        raise FormatError(f"{path}: payload holds {len(body)} bytes, header promises {4 * rows * cols}")
    return tuple(fields), np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_feature_cache(path, frames: np.ndarray, hop_ms: int) -> None:
    T, F = frames.shape
    _write_matrix(path, FEATURE_MAGIC, (T, F, hop_ms), frames)


def read_feature_cache(path) -> tuple[np.ndarray, int]:
    (T, F, hop_ms), mat = _read_matrix(path, FEATURE_MAGIC, 3)
    return mat, hop_ms


def write_posteriors(path, post: np.ndarray, hop_ms: int) -> None:
    """Store an N x T posterior matrix frame-major (T rows, N columns)."""
    _write_matrix(path, POSTERIOR_MAGIC, (post.shape[1], post.shape[0], hop_ms), post.T)


def read_posteriors(path) -> tuple[np.ndarray, int]:
    (T, N, hop_ms), mat = _read_matrix(path, POSTERIOR_MAGIC, 3)
    return mat.T.copy(), hop_ms


def write_memory_bank(path, vectors: np.ndarray) -> None:
    K, D = vectors.shape
    _write_matrix(path, MEMORY_MAGIC, (K, D), vectors)


def read_memory_bank(path) -> np.ndarray:
    _, mat = _read_matrix(path, MEMORY_MAGIC, 2)
    return mat
