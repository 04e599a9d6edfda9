"""Differentiable dense ops.

All ops accept ``Tensor`` or array-likes and broadcast like numpy.  Batch
dimensions lead; feature dimensions trail.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from ..errors import ConfigError, DimensionError
from .tensor import Tensor, as_tensor, get_default_dtype, make_op


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return make_op(out, (a, b), bw, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return special.expit(z)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def swish(x) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    out = xd * s
    return make_op(out, (x,), lambda g: (g * (s + out * (1.0 - s)),), "swish")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return make_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp; zero gradient where clamped."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def gated_fuse(beta, a, b) -> Tensor:
    """beta * a + (1 - beta) * b with a scalar (or broadcastable) gate.

    Fused so the gate path has a single, inspectable adjoint rule.
    """
    beta, a, b = as_tensor(beta), as_tensor(a), as_tensor(b)
    bd, ad, cd = beta.data, a.data, b.data
    out = bd * ad + (1.0 - bd) * cd

    def bw(g):
        return (
            _unbroadcast(_GATE_GRAD_SIGN * g * (ad - cd), bd.shape) if beta.requires_grad else None,
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * (1.0 - bd), cd.shape) if b.requires_grad else None,
        )

    return make_op(out, (beta, a, b), bw, "gated_fuse")


# Fault-injection hook for mutation tests of the gate adjoint; +1 in normal use.
_GATE_GRAD_SIGN = 1.0


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- shape ------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)
    return make_op(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    dtype = x.data.dtype

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_op(x.data[idx], (x,), bw, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return make_op(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_op(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# -- reductions -------------------------------------------------------------


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return make_op(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalization / attention ---------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (x,), bw, "log_softmax")


def softmax_rows(x) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last dimension (population variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shape {gain.shape}/{bias.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = gxh = None
        if x.requires_grad:
            gxh = g * gain.data
            gx = rstd * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return make_op(out, (x, gain, bias), bw, "layer_norm")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity unless ``training`` and ``p > 0``."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def scaled_dot_attention(q, k, v, scale: float, mask=None) -> Tensor:
    """softmax(q k^T * scale) v over the last two axes."""
    scores = mul(matmul(q, swapaxes(k, -1, -2)), scale)
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def split_heads(x, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d/heads)."""
    *lead, L, d = x.shape
    x = reshape(x, (*lead, L, heads, d // heads))
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return transpose(x, axes)


def merge_heads(x) -> Tensor:
    """(..., heads, L, dh) -> (..., L, heads*dh)."""
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    x = transpose(x, axes)
    *lead, L, h, dh = x.shape
    return reshape(x, (*lead, L, h * dh))


def multi_head_attention(q, k, v, heads: int, params: dict) -> Tensor:
    """Multi-head scaled dot-product attention with input/output projections.

    ``params`` holds ``wq, wk, wv, wo`` of shape (d, d) and biases
    ``bq, bk, bv, bo`` of shape (d,).  Logits are scaled by
    1/sqrt(d/heads).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"attention dims differ: q {q.shape}, k {k.shape}, v {v.shape}")
    qh = split_heads(linear(q, params["wq"], params["bq"]), heads)
    kh = split_heads(linear(k, params["wk"], params["bk"]), heads)
    vh = split_heads(linear(v, params["wv"], params["bv"]), heads)
    ctx = scaled_dot_attention(qh, kh, vh, 1.0 / math.sqrt(d // heads))
    return linear(merge_heads(ctx), params["wo"], params["bo"])


# -- convolution --------------------------------------------------------------


def _pad2(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """2-D cross-correlation on (B, C_in, H, W) with weight (C_out, C_in, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shapes incompatible: x {x.shape}, w {weight.shape}")
    sh, sw = stride
    ph, pw = padding
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    xp = _pad2(x.data, ph, pw)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")
    # cols: (B, Ho, Wo, C, kh, kw)
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp,
        shape=(B, Ho, Wo, C, kh, kw),
        strides=(s[0], s[2] * sh, s[3] * sw, s[1], s[2], s[3]),
        writeable=False,
    )
    wmat = weight.data.reshape(O, C * kh * kw)
    colmat = cols.reshape(B * Ho * Wo, C * kh * kw)
    out = (colmat @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        parents.append(bias)
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ colmat).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return res

    return make_op(out, parents, bw, "conv2d")


def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """'Same'-padded depthwise convolution along time.

    x: (B, T, C); weight: (k, C) with odd k; bias: (C,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    k, C = weight.shape
    if k % 2 == 0 or x.shape[-1] != C:
        raise DimensionError(f"depthwise_conv1d needs odd kernel and matching channels: x {x.shape}, w {weight.shape}")
    T = x.shape[-2]
    pad = k // 2
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, widths)
    wd = weight.data
    out = np.zeros(x.shape, dtype=x.data.dtype)
    for i in range(k):
        out += xp[..., i : i + T, :] * wd[i]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gp = np.pad(g, widths)
            gx = np.zeros_like(x.data)
            # correlation adjoint: flip the kernel
            for i in range(k):
                gx += gp[..., k - 1 - i : k - 1 - i + T, :] * wd[i]
        if weight.requires_grad:
            gw = np.stack([(xp[..., i : i + T, :] * g).reshape(-1, C).sum(axis=0) for i in range(k)])
        res = [gx, gw]
        if bias is not None:
            res.append(g.reshape(-1, C).sum(axis=0) if bias.requires_grad else None)
        return res

    return make_op(out, parents, bw, "depthwise_conv1d")


# -- constants ----------------------------------------------------------------


def sinusoidal_pe(T: int, D: int) -> np.ndarray:
    """PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(same angle)."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, D, 2, dtype=np.float64)
    ang = pos / np.power(10000.0, i2 / D)
    pe = np.zeros((T, D))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : D // 2])
    return pe.astype(get_default_dtype())
