"""Multi-speaker BCE objective, Adam, mixup and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, InputError, TrainingError
from .model import NSDModel, save_checkpoint
from .numcore import Tensor, as_tensor, backward, make_op, no_grad
from .scoring import frame_der
from .storage import write_text_atomic

log = logging.getLogger(__name__)

CLAMP = 1e-7


def bce_loss(y_hat, y, slot_mask=None) -> Tensor:
    """-(1/T) sum_t sum_n [y log p + (1 - y) log(1 - p)], p clamped to [1e-7, 1 - 1e-7].

    Shapes (N, T) or (B, N, T); a batch is averaged over B.  ``slot_mask``
    of shape (N,) or (B, N) drops padded speaker rows from the sum.
    """
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.data.dtype)
    if y.shape != y_hat.shape:
        raise DimensionError(f"prediction {y_hat.shape} and label {y.shape} shapes differ")
    T = y.shape[-1]
    B = y.shape[0] if y.ndim == 3 else 1
    w = np.ones(y.shape[:-1], dtype=y.dtype) if slot_mask is None else np.asarray(slot_mask, dtype=y.dtype)
    w = np.broadcast_to(w, y.shape[:-1])[..., None]
    p = np.clip(y_hat.data, CLAMP, 1.0 - CLAMP)
    terms = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    value = -(w * terms).sum() / (T * B)
    inside = (y_hat.data >= CLAMP) & (y_hat.data <= 1.0 - CLAMP)

    def bw(g):
        d = -(y / p - (1.0 - y) / (1.0 - p)) * w / (T * B)
        return (g * np.where(inside, d, 0.0),)

    return make_op(np.asarray(value, dtype=y.dtype), (y_hat,), bw, "bce")


@dataclass
class Adam:
    """Adam with bias correction; update of each tensor uses only its own state."""

    params: Mapping[str, Tensor]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- data ------------------------------------------------------------------------


@dataclass
class TrainExample:
    X: np.ndarray  # (T, F) features
    S: np.ndarray  # (N, T) input mask
    Y: np.ndarray  # (N, T) labels in [0, 1]
    ivec: np.ndarray  # (N, ivec_dim)
    slots: np.ndarray | None = None  # (N,) 1 for real speakers, 0 for padding
    channel: int = 0
    rec_id: str = ""

    def __post_init__(self):
        T = self.X.shape[0]
        if self.S.shape != self.Y.shape or self.S.shape[1] != T:
            raise DimensionError(f"mask {self.S.shape}, labels {self.Y.shape} and features {self.X.shape} disagree")
        if self.ivec.shape[0] != self.S.shape[0]:
            raise DimensionError(f"{self.ivec.shape[0]} i-vectors for {self.S.shape[0]} speakers")
        if self.slots is None:
            self.slots = np.ones(self.S.shape[0])


@dataclass
class Batch:
    X: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    ivec: np.ndarray
    slots: np.ndarray


def stack(batch: Sequence[TrainExample]) -> Batch:
    """Stack equal-shape examples along a leading batch axis."""
    return Batch(*(np.stack([getattr(e, f) for e in batch]) for f in ("X", "S", "Y", "ivec", "slots")))


def mixup(batch: Batch, alpha: float = 0.5, rng: np.random.Generator | None = None, lam: float | None = None) -> Batch:
    """Convex combination of each example with a shuffled partner.

    Features, labels and i-vectors mix with weight lambda ~ Beta(alpha, alpha);
    input masks are OR-ed.
    """
    B = batch.X.shape[0]
    if B < 2:
        raise InputError("mixup needs a batch of at least 2")
    rng = rng or np.random.default_rng()
    lam = rng.beta(alpha, alpha) if lam is None else lam
    perm = rng.permutation(B)

    def mix(a):
        return lam * a + (1.0 - lam) * a[perm]

    S = np.maximum(batch.S, batch.S[perm])
    return Batch(mix(batch.X), S, mix(batch.Y), mix(batch.ivec), np.maximum(batch.slots, batch.slots[perm]))


# -- loop ------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 8
    lr: float = 1e-4
    seed: int = 0
    mixup: bool = False
    mixup_alpha: float = 0.5
    threshold: float = 0.5
    eval_pass: bool = False  # re-score the training set after each epoch
    random_crops: bool = True  # re-cut shifted windows each epoch when the data supports it


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    train_der: float


def predict(model: NSDModel, batch, mem_x, mem_i) -> np.ndarray:
    with no_grad():
        return model(batch.X, batch.S, batch.ivec, mem_x, mem_i).data


def evaluate(model: NSDModel, examples: Sequence[TrainExample], mem_x, mem_i, batch_size: int = 8, threshold: float = 0.5):
    """Mean loss and frame-level DER (slots mapped optimally) over ``examples``."""
    was = model.training
    model.eval()
    loss, err, ref = 0.0, 0.0, 0.0
    for i in range(0, len(examples), batch_size):
        b = stack(examples[i : i + batch_size])
        y = predict(model, b, mem_x, mem_i)
        loss += bce_loss(y, b.Y, b.slots).item() * len(b.X)
        for yh, yt, sl in zip(y, b.Y, b.slots):
            keep = sl > 0
            e, r = frame_der(yt[keep], yh[keep] > threshold)
            err, ref = err + e, ref + r
    model.train(was)
    return loss / len(examples), err / max(ref, 1.0)


def train(
    model: NSDModel,
    examples: Sequence[TrainExample],
    mem_x: np.ndarray,
    mem_i: np.ndarray,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    checkpoint_extra: dict | None = None,
) -> list[EpochMetrics]:
    """Seeded mini-batch Adam on the BCE objective.

    Writes ``metrics.csv`` and ``epoch{k}.json`` checkpoints to ``out_dir``
    when given.  If ``examples`` has a ``resample(rng)`` method (see
    ``pipeline.ChunkedCorpus``) each epoch trains on a fresh set of shifted
    crops.  The logged loss is the mean training loss of the epoch.
    The DER is pooled over the epoch's own forward passes (labels above
    0.5 count as speech), or measured after the epoch with dropout off
    when ``cfg.eval_pass`` is set.
    """
    if not examples:
        raise InputError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    model.reseed_dropout([cfg.seed, 7])
    model.train()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    history: list[EpochMetrics] = []
    resample = getattr(examples, "resample", None) if cfg.random_crops else None
    for epoch in range(1, cfg.epochs + 1):
        data = resample(rng) if resample else examples
        order = rng.permutation(len(data))
        total, count, err, ref = 0.0, 0, 0.0, 0.0
        for i in range(0, len(order), cfg.batch_size):
            b = stack([data[j] for j in order[i : i + cfg.batch_size]])
            if cfg.mixup and len(b.X) >= 2:
                b = mixup(b, cfg.mixup_alpha, rng)
            opt.zero_grad()
            y_hat = model(b.X, b.S, b.ivec, mem_x, mem_i)
            loss = bce_loss(y_hat, b.Y, b.slots)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {i // cfg.batch_size}")
            backward(loss)
            opt.step()
            total += loss.item() * len(b.X)
            count += len(b.X)
            if not cfg.eval_pass:
                for yh, yt, sl in zip(y_hat.data, b.Y, b.slots):
                    e, r = frame_der(yt[sl > 0] > 0.5, yh[sl > 0] > cfg.threshold)
                    err, ref = err + e, ref + r
        if cfg.eval_pass:
            _, der = evaluate(model, examples, mem_x, mem_i, cfg.batch_size, cfg.threshold)
        else:
            der = err / max(ref, 1.0)
        m = EpochMetrics(epoch, total / count, der)
        history.append(m)
        log.info("epoch %d loss %.5f train_der %.4f", epoch, m.loss, m.train_der)
        if out_dir is not None:
            out = Path(out_dir)
            save_checkpoint(out / f"epoch{epoch}.json", model, {**(checkpoint_extra or {}), "epoch": epoch, "loss": m.loss})
            write_text_atomic(out / "metrics.csv", metrics_csv(history))
        if on_epoch:
            on_epoch(m)
    return history


def metrics_csv(history: Sequence[EpochMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "train_der"])
    for m in history:
        w.writerow([m.epoch, f"{m.loss:.6f}", f"{m.train_der:.6f}"])
    return buf.getvalue()


def gradcheck_problem(cfg=None, T: int = 20, N: int = 2, K: int = 6, seed: int = 0):
    """(model, loss_fn) on seeded random inputs, for finite-difference checks.

    Defaults to the tiny configuration with two memory banks of K rows.
    Dropout is off so the loss is a deterministic function of the weights.
    """
    from .model import ModelConfig

    cfg = cfg or ModelConfig.tiny(n_max=max(2, N), t_out=T, seed=seed)
    model = NSDModel(cfg).eval()
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(T, cfg.n_feats))
    S = (rng.random((N, T)) > 0.5).astype(float)
    iv = rng.normal(size=(N, cfg.ivec_dim))
    mem_x, mem_i = rng.normal(size=(K, cfg.xvec_dim)), rng.normal(size=(K, cfg.ivec_dim))
    Y = (rng.random((N, cfg.t_out)) > 0.5).astype(float)
    return model, lambda: bce_loss(model(X, S, iv, mem_x, mem_i), Y)
