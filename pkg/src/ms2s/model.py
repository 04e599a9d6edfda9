"""The speaker-detection network: conv front-end, conformer encoder,
memory-aware speaker embeddings and the gated sequence-to-sequence decoder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .mamse import Aggregator, Mamse, select_features
from .numcore import Tensor, as_tensor, get_default_dtype, ops
from .numcore.nn import Dropout, LayerNorm, Linear, Module, MultiHeadAttention, glorot, param
from .storage import atomic_open


@dataclass
class ModelConfig:
    d_model: int = 512
    heads: int = 8
    encoder_blocks: int = 6
    decoder_blocks: int = 6
    ffn_dim: int = 1024
    dropout: float = 0.1
    conv_channels: int = 32
    n_feats: int = 40
    n_max: int = 4
    t_out: int = 800
    xvec_dim: int = 256
    ivec_dim: int = 100
    conv_kernel: int = 15
    retrieval: str = "dim"
    top_r: int = 8
    beta_init: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0 or self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of heads={self.heads}")
        if self.n_feats % 2:
            raise ConfigError(f"feature dim {self.n_feats} must be even")
        for f in ("ffn_dim", "conv_channels", "n_max", "t_out", "xvec_dim", "ivec_dim", "top_r"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if self.encoder_blocks < 0 or self.decoder_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.retrieval not in ("dim", "additive"):
            raise ConfigError(f"unknown retrieval {self.retrieval!r}")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(d_model=64, heads=4, encoder_blocks=2, decoder_blocks=2, ffn_dim=128, t_out=200)
        return cls(**{**base, **kw})

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(
            d_model=16, heads=2, encoder_blocks=1, decoder_blocks=1, ffn_dim=32, dropout=0.0,
            conv_channels=4, n_feats=8, n_max=2, t_out=20, xvec_dim=12, ivec_dim=10, conv_kernel=5,
        )
        return cls(**{**base, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# -- encoder --------------------------------------------------------------------


class ConvFrontend(Module):
    """Two 3x3 convs (second strided over frequency), then a per-frame projection."""

    def __init__(self, cfg: ModelConfig, rng):
        C, F = cfg.conv_channels, cfg.n_feats
        self.n_feats = F
        self.w1 = glorot(rng, 9, 9 * C, shape=(C, 1, 3, 3))
        self.b1 = param(np.zeros(C))
        self.w2 = glorot(rng, 9 * C, 9 * C, shape=(C, C, 3, 3))
        self.b2 = param(np.zeros(C))
        self.proj = Linear(C * (F // 2), cfg.d_model, rng)

    def __call__(self, x) -> Tensor:
        """(B, T, F) -> (B, T, D)."""
        x = as_tensor(x)
        if x.shape[-1] != self.n_feats:
            raise ConfigError(f"expected {self.n_feats} features per frame, got {x.shape[-1]}")
        B, T, F = x.shape
        h = ops.swish(ops.conv2d(ops.reshape(x, (B, 1, T, F)), self.w1, self.b1, padding=(1, 1)))
        h = ops.swish(ops.conv2d(h, self.w2, self.b2, stride=(1, 2), padding=(1, 1)))
        C, Fh = h.shape[1], h.shape[3]
        h = ops.reshape(ops.transpose(h, (0, 2, 1, 3)), (B, T, C * Fh))
        return self.proj(h)


class FeedForward(Module):
    def __init__(self, d, ffn, drop: Dropout, rng):
        self.ln = LayerNorm(d)
        self.fc1 = Linear(d, ffn, rng)
        self.fc2 = Linear(ffn, d, rng)
        self._drop = drop

    def __call__(self, x) -> Tensor:
        h = self._drop(ops.swish(self.fc1(self.ln(x))))
        return self._drop(self.fc2(h))


class ConvModule(Module):
    """Pointwise conv + GLU, depthwise conv over time, norm, swish, pointwise conv."""

    def __init__(self, d, kernel, drop: Dropout, rng):
        self.ln = LayerNorm(d)
        self.pw1 = Linear(d, 2 * d, rng)
        self.dw = glorot(rng, kernel, kernel, shape=(kernel, d))
        self.dw_b = param(np.zeros(d))
        self.norm = LayerNorm(d)
        self.pw2 = Linear(d, d, rng)
        self._drop = drop
        self.d = d

    def __call__(self, x) -> Tensor:
        h = self.pw1(self.ln(x))
        d = self.d
        h = ops.mul(ops.getitem(h, (Ellipsis, slice(0, d))), ops.sigmoid(ops.getitem(h, (Ellipsis, slice(d, 2 * d)))))
        h = ops.swish(self.norm(ops.depthwise_conv1d(h, self.dw, self.dw_b)))
        return self._drop(self.pw2(h))


class ConformerBlock(Module):
    def __init__(self, cfg: ModelConfig, drop: Dropout, rng):
        d = cfg.d_model
        self.ff1 = FeedForward(d, cfg.ffn_dim, drop, rng)
        self.ln_att = LayerNorm(d)
        self.att = MultiHeadAttention(d, cfg.heads, rng)
        self.conv = ConvModule(d, cfg.conv_kernel, drop, rng)
        self.ff2 = FeedForward(d, cfg.ffn_dim, drop, rng)
        self.ln_out = LayerNorm(d)
        self._drop = drop

    def __call__(self, x) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        h = self.ln_att(x)
        x = x + self._drop(self.att(h, h, h))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.ln_out(x)


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, drop: Dropout, rng):
        self.blocks = [ConformerBlock(cfg, drop, rng) for _ in range(cfg.encoder_blocks)]

    def __call__(self, fp) -> Tensor:
        fp = as_tensor(fp)
        x = fp + ops.sinusoidal_pe(fp.shape[-2], fp.shape[-1])
        for blk in self.blocks:
            x = blk(x)
        return x


# -- decoder --------------------------------------------------------------------


def _gate(beta, a, b) -> Tensor:
    """beta * a + (1 - beta) * b; module-level so mutation tests can swap it."""
    return ops.gated_fuse(beta, a, b)


class SDBlock(Module):
    """Speaker-detection decoder block.

    Stage 1 mixes decoder and aggregate embeddings through gates beta1/beta2
    and self-attends across speakers.  Stage 2 gates the result against the
    aggregate embedding (beta3) and cross-attends over encoder frames whose
    keys carry the positional embedding.  Stage 3 is a feed-forward layer.
    Each stage is residual.
    """

    def __init__(self, cfg: ModelConfig, drop: Dropout, rng):
        d = cfg.d_model
        self.d_q1, self.d_k1, self.d_v1 = (Linear(d, d, rng) for _ in range(3))
        self.a_q1, self.a_k1 = (Linear(d, d, rng) for _ in range(2))
        self.beta1 = param(np.full(1, cfg.beta_init))
        self.beta2 = param(np.full(1, cfg.beta_init))
        self.beta3 = param(np.full(1, cfg.beta_init))
        self.ln_q1, self.ln_k1, self.ln_v1 = LayerNorm(d), LayerNorm(d), LayerNorm(d)
        self.self_att = MultiHeadAttention(d, cfg.heads, rng)
        self.f_q2, self.a_q2 = Linear(d, d, rng), Linear(d, d, rng)
        self.e_k2, self.e_v2 = Linear(d, d, rng), Linear(d, d, rng)
        self.ln_q2, self.ln_k2, self.ln_v2 = LayerNorm(d), LayerNorm(d), LayerNorm(d)
        self.cross_att = MultiHeadAttention(d, cfg.heads, rng)
        self.ffn = FeedForward(d, cfg.ffn_dim, drop, rng)
        self._drop = drop

    def stage1_inputs(self, ed, ea) -> tuple[Tensor, Tensor, Tensor]:
        q1 = _gate(self.beta1, self.d_q1(ed), self.a_q1(ea))
        k1 = _gate(self.beta2, self.d_k1(ed), self.a_k1(ea))
        return q1, k1, self.d_v1(ed)

    def stage2_query(self, ef, ea) -> Tensor:
        return _gate(self.beta3, self.f_q2(ef), self.a_q2(ea))

    def __call__(self, ed, ea, enc, pe) -> Tensor:
        ed, ea, enc = as_tensor(ed), as_tensor(ea), as_tensor(enc)
        q1, k1, v1 = self.stage1_inputs(ed, ea)
        ef = ed + self._drop(self.self_att(self.ln_q1(q1), self.ln_k1(k1), self.ln_v1(v1)))
        q2 = self.stage2_query(ef, ea)
        k2 = self.e_k2(enc) + pe
        v2 = self.e_v2(enc)
        h = ef + self._drop(self.cross_att(self.ln_q2(q2), self.ln_k2(k2), self.ln_v2(v2)))
        return h + self.ffn(h)


class NSDModel(Module):
    """Maps features, speaker masks, i-vectors and memory banks to posteriors.

    Shapes: X (B, T, F); S (B, N, T); ivec (B, N, ivec_dim); memory banks
    (K, xvec_dim) and (K', ivec_dim).  Output (B, N, t_out) in (0, 1).
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self._drop = Dropout(cfg.dropout, np.random.default_rng([cfg.seed, 1]))
        d = cfg.d_model
        self.frontend = ConvFrontend(cfg, rng)
        self.encoder = Encoder(cfg, self._drop, rng)
        self.mamse_x = Mamse(d, cfg.xvec_dim, rng, cfg.retrieval, cfg.top_r)
        self.mamse_i = Mamse(d, cfg.ivec_dim, rng, cfg.retrieval, cfg.top_r)
        self.aggregate = Aggregator(cfg.xvec_dim + 2 * cfg.ivec_dim, d, rng)
        self.queries = param(rng.normal(0.0, 0.02, size=(cfg.n_max, d)))
        self.decoder = [SDBlock(cfg, self._drop, rng) for _ in range(cfg.decoder_blocks)]
        self.out = Linear(d, cfg.t_out, rng)

    def reseed_dropout(self, seed) -> None:
        self._drop.reseed(np.random.default_rng(seed))

    def encode(self, X) -> tuple[Tensor, Tensor]:
        fp = self.frontend(X)
        return fp, self.encoder(fp)

    def speaker_embeddings(self, fp, S, ivec, mem_x, mem_i) -> Tensor:
        fs = select_features(fp, S)
        return self.aggregate(self.mamse_x(fs, mem_x), self.mamse_i(fs, mem_i), ivec)

    def decode(self, ea, enc, slots=None) -> Tensor:
        N = ea.shape[-2]
        if N > self.cfg.n_max:
            raise ConfigError(f"{N} speakers exceed n_max={self.cfg.n_max}")
        slots = np.arange(N) if slots is None else np.asarray(slots)
        ed = ops.getitem(self.queries, slots)
        pe = ops.sinusoidal_pe(enc.shape[-2], enc.shape[-1])
        for blk in self.decoder:
            ed = blk(ed, ea, enc, pe)
        return ops.sigmoid(self.out(ed))

    def __call__(self, X, S, ivec, mem_x, mem_i, slots=None) -> Tensor:
        X = as_tensor(X)
        S = np.asarray(S)
        if X.ndim == 2:
            return ops.getitem(self(X.data[None], S[None], np.asarray(ivec)[None], mem_x, mem_i, slots), 0)
        if S.shape[-1] != X.shape[-2]:
            raise ConfigError(f"mask has {S.shape[-1]} frames, features have {X.shape[-2]}")
        fp, enc = self.encode(X)
        ea = self.speaker_embeddings(fp, S, ivec, mem_x, mem_i)
        return self.decode(ea, enc, slots)


# -- checkpoints ----------------------------------------------------------------


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: NSDModel, extra: dict | None = None) -> None:
    """JSON manifest at ``path`` plus a raw parameter blob beside it (``.bin``)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    params = model.parameters()
    dtype = np.dtype(get_default_dtype()).newbyteorder("<")
    width = dtype.itemsize * 8
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "float_bits": width,
        "seed": model.cfg.seed,
        "blob": blob_path.name,
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params.items()],
        **(extra or {}),
    }
    with atomic_open(blob_path) as fh:
        for p in params.values():
            fh.write(np.ascontiguousarray(p.data, dtype=dtype).tobytes())
    with atomic_open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple[NSDModel, dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: invalid manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    model = NSDModel(ModelConfig.from_dict(manifest["config"]))
    dtype = np.dtype("<f8" if manifest["float_bits"] == 64 else "<f4")
    raw = (path.parent / manifest["blob"]).read_bytes()
    params = model.parameters()
    names = [e["name"] for e in manifest["params"]]
    if names != list(params):
        raise FormatError(f"{path}: parameter names do not match the model built from its config")
    offset = 0
    for entry in manifest["params"]:
        p = params[entry["name"]]
        if tuple(entry["shape"]) != p.shape:
            raise FormatError(f"{path}: {entry['name']} has shape {entry['shape']}, model expects {list(p.shape)}")
        n = int(math.prod(p.shape)) * dtype.itemsize
        if offset + n > len(raw):
            raise FormatError(f"{path}: parameter blob truncated at {entry['name']}")
        p.data[...] = np.frombuffer(raw[offset : offset + n], dtype=dtype).reshape(p.shape)
        offset += n
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes in parameter blob")
    return model, manifest
