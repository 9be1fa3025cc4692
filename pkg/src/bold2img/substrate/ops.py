"""Differentiable operations: the fixed layer inventory plus graph glue.

Layout convention is channels-last: images are (B, H, W, C), token matrices
are (B, P, D). Convolutions are 3x3 with zero padding at stride 1 or 2,
lowered to nine batched matmuls over kernel offsets; the offset-major column
tensor is kept alive for the backward pass. Backward closures hand freshly
allocated arrays to `accumulate_grad(..., fresh=True)` so no defensive
copies happen on the hot path.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .rng import RngKey
from .tensor import Tensor, as_tensor, grad_enabled, make_node

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient g down to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a.accumulate_grad(ga, fresh=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b.accumulate_grad(gb, fresh=gb is not g)

    return make_node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            a.accumulate_grad(ga, fresh=ga is not g)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape), fresh=True)

    return make_node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), fresh=True)

    return make_node(out, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * s

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s, fresh=True)

    return make_node(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            # g is dead after this node's backward; its single parent may own it
            a.accumulate_grad(g.reshape(old), fresh=True)

    return make_node(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv), fresh=True)

    return make_node(out, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                # disjoint slices of a dead gradient; parents may own them
                t.accumulate_grad(g[tuple(idx)], fresh=True)

    return make_node(out, tuple(tensors), backward)


def expand_batch(a, batch: int) -> Tensor:
    """Replicate a parameter along a new leading batch axis."""
    a = as_tensor(a)
    out = np.broadcast_to(a.data, (batch,) + a.data.shape).copy()

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.sum(axis=0), fresh=True)

    return make_node(out, (a,), backward)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select a where mask else b; mask is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(np.where(mask, g, 0.0), a.data.shape), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.where(mask, 0.0, g), b.data.shape), fresh=True)

    return make_node(out, (a, b), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g / n), fresh=True)

    return make_node(out, (a,), backward)


def mse_loss(a, target) -> Tensor:
    a = as_tensor(a)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    diff = a.data - t
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad((2.0 / n) * g * diff, fresh=True)

    return make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# matmul / linear


def matmul(a, b) -> Tensor:
    """2-D or batched 3-D matrix product (batch dims must match, or b is 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape), fresh=True)
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape), fresh=True)

    return make_node(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """y = x @ w + b over the last axis; x may have any leading shape."""
    x, w = as_tensor(x), as_tensor(w)
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        y += b.data
    out = y.reshape(lead + (w.data.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(x.data.shape), fresh=True)
        if w.requires_grad:
            w.accumulate_grad(x2.T @ g2, fresh=True)
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), fresh=True)

    return make_node(out, parents, backward)


# ---------------------------------------------------------------------------
# convolution


import threading


class _BufferPool:
    """Recycles large scratch arrays; fresh multi-MB allocations fault in
    zero pages on every call, which dominates conv cost on small machines."""

    def __init__(self, max_per_shape: int = 8):
        self._free: dict[tuple, list[np.ndarray]] = {}
        self._lock = threading.Lock()
        self._max = max_per_shape

    def acquire(self, shape: tuple, dtype) -> np.ndarray:
        key = (shape, np.dtype(dtype).str)
        with self._lock:
            lst = self._free.get(key)
            if lst:
                return lst.pop()
        return np.empty(shape, dtype)

    def release(self, arr: np.ndarray | None):
        if arr is None:
            return
        key = (arr.shape, arr.dtype.str)
        with self._lock:
            lst = self._free.setdefault(key, [])
            if len(lst) < self._max:
                lst.append(arr)


_POOL = _BufferPool()


def _im2col_flat(xp: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    """Column matrix (B*OH*OW, 9*C) in a pooled buffer.

    Per kernel row the (kj, c) window is one contiguous 3C-run of the padded
    input, so the gather is three strided copies per batch chunk.
    """
    b, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    col = _POOL.acquire((b, oh, ow, 3, 3 * c), xp.dtype)
    for ki in range(3):
        view = np.lib.stride_tricks.as_strided(
            xp[:, ki:],
            shape=(b, oh, ow, 3 * c),
            strides=(s0, s1 * stride, s2 * stride, s3),
        )
        np.copyto(col[:, :, :, ki, :], view)
    return col


def _conv_gemm(x: np.ndarray, w4: np.ndarray, stride: int, keep_col: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Forward conv pass; returns (output 4-D, pooled column matrix or None)."""
    kh, kw, cin, cout = w4.shape
    bb, h, ww_, _ = x.shape
    oh = (h + 2 - kh) // stride + 1
    ow = (ww_ + 2 - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    col = _im2col_flat(xp, stride, oh, ow)
    y = col.reshape(bb * oh * ow, 9 * cin) @ w4.reshape(kh * kw * cin, cout)
    if not keep_col:
        _POOL.release(col)
        col = None
    return y.reshape(bb, oh, ow, cout), col


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 zero-padded convolution, stride 1 or 2.

    x: (B, H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,).
    """
    x, w = as_tensor(x), as_tensor(w)
    kh, kw, cin, cout = w.data.shape
    bb, h, ww_, c = x.data.shape
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {cin}")
    need_graph = w.requires_grad or x.requires_grad or (b is not None and as_tensor(b).requires_grad)
    out4, col = _conv_gemm(x.data, w.data, stride, keep_col=need_graph and grad_enabled())
    if b is not None:
        b = as_tensor(b)
        out4 += b.data
    oh, ow = out4.shape[1], out4.shape[2]
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if w.requires_grad:
            w.accumulate_grad(
                (col.reshape(bb * oh * ow, 9 * cin).T @ g2).reshape(kh, kw, cin, cout), fresh=True
            )
        if b is not None and b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), fresh=True)
        _POOL.release(col)
        if x.requires_grad:
            if stride == 1:
                # input gradient is a convolution of g with the rotated,
                # transposed kernel; reuses the fat-GEMM path
                w_rot = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
                dx, _ = _conv_gemm(g, w_rot, 1, keep_col=False)
                x.accumulate_grad(dx, fresh=True)
            else:
                dcol = (g2 @ w.data.reshape(kh * kw * cin, cout).T).reshape(bb, oh, ow, kh, kw, cin)
                dxp = np.zeros((bb, h + 2, ww_ + 2, cin), dtype=g.dtype)
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[:, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride, :] += dcol[
                            :, :, :, ki, kj, :
                        ]
                x.accumulate_grad(dxp[:, 1 : 1 + h, 1 : 1 + ww_, :], fresh=True)

    return make_node(out4, parents, backward)


# ---------------------------------------------------------------------------
# normalization


def group_norm(x, gamma, beta, groups: int = 8, eps: float = 1e-5) -> Tensor:
    """Normalize (B, H, W, C) over spatial dims and channels within a group."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bb, h, w, c = x.data.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    n = h * w * cg
    x3 = x.data.reshape(bb, h * w, c)
    # per-(batch, group) moments via per-(batch, channel) sums
    s_bc = x3.sum(axis=1)  # (B, C)
    q_bc = np.einsum("bsc,bsc->bc", x3, x3)  # (B, C)
    mu = s_bc.reshape(bb, groups, cg).sum(axis=2) / n  # (B, G)
    ex2 = q_bc.reshape(bb, groups, cg).sum(axis=2) / n
    inv = 1.0 / np.sqrt(ex2 - mu * mu + eps)  # (B, G)
    # y = x * a + s with per-(batch, channel) affine factors, one fused pass
    a_bc = np.repeat(inv, cg, axis=1) * gamma.data  # (B, C)
    s_bc_fact = beta.data - np.repeat(mu, cg, axis=1) * a_bc
    out = (x3 * a_bc[:, None, :] + s_bc_fact[:, None, :]).reshape(bb, h, w, c)

    def backward(g):
        g3 = g.reshape(bb, h * w, c)
        if beta.requires_grad:
            beta.accumulate_grad(g3.sum(axis=(0, 1)), fresh=True)
        need_gamma = gamma.requires_grad
        need_x = x.requires_grad
        if not (need_gamma or need_x):
            return
        gs_bc = g3.sum(axis=1)  # (B, C)
        gx_bc = np.einsum("bsc,bsc->bc", g3, x3)  # (B, C)
        inv_bc = np.repeat(inv, cg, axis=1)
        mu_bc = np.repeat(mu, cg, axis=1)
        gxhat_bc = (gx_bc - mu_bc * gs_bc) * inv_bc  # sum over space of g * xhat
        if need_gamma:
            gamma.accumulate_grad(gxhat_bc.sum(axis=0), fresh=True)
        if need_x:
            # dx = inv * (g*gamma - mean(g*gamma) - xhat * mean(g*gamma*xhat))
            m1 = ((gs_bc * gamma.data).reshape(bb, groups, cg).sum(axis=2) / n)
            m2 = ((gxhat_bc * gamma.data).reshape(bb, groups, cg).sum(axis=2) / n)
            m1_bc = np.repeat(m1, cg, axis=1)
            m2_bc = np.repeat(m2, cg, axis=1)
            coef_a = inv_bc * gamma.data  # (B, C) multiplies g
            coef_b = inv_bc * inv_bc * m2_bc  # multiplies (x - mu)
            coef_c = inv_bc * m1_bc + coef_b * (-mu_bc)  # constant term
            dx = g3 * coef_a[:, None, :]
            dx -= x3 * coef_b[:, None, :]
            dx -= coef_c[:, None, :]
            x.accumulate_grad(dx.reshape(bb, h, w, c), fresh=True)

    return make_node(out, (x, gamma, beta), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; a zero-variance vector maps to beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0), fresh=True)
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0), fresh=True)
        if x.requires_grad:
            dxh = g * gamma.data
            s1 = dxh.mean(axis=-1, keepdims=True)
            s2 = (dxh * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (dxh - s1 - xhat * s2), fresh=True)

    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# activations


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        if x.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            x.accumulate_grad(g * (cdf + x.data * pdf), fresh=True)

    return make_node(out.astype(x.data.dtype, copy=False), (x,), backward)


def silu(x) -> Tensor:
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        if x.requires_grad:
            # d/dx (x * sig) = sig + out * (1 - sig), built in place
            d = 1.0 - sig
            d *= out
            d += sig
            d *= g
            x.accumulate_grad(d, fresh=True)

    return make_node(out, (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - dot), fresh=True)

    return make_node(out, (x,), backward)


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q: (B, N, D), k: (B, M, D), v: (B, M, Dv).
    """
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(d))
    return matmul(softmax(scores), v)


def dropout(x, p: float, key: RngKey, training: bool = True) -> Tensor:
    """Inverted dropout: active units scaled by 1/(1-p) so E[y] = x."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = key.generator().random(x.data.shape) >= p
    m = keep.astype(x.data.dtype) / (1.0 - p)
    out = x.data * m

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * m, fresh=True)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# resampling


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g):
        if x.requires_grad:
            bb, h2, w2, c = g.shape
            # two single-axis reductions beat one dual-axis reduction here
            t = g.reshape(bb * h2 * (w2 // 2), 2, c).sum(axis=1)
            t = t.reshape(bb, h2 // 2, 2, (w2 // 2) * c).sum(axis=2)
            x.accumulate_grad(t.reshape(bb, h2 // 2, w2 // 2, c), fresh=True)

    return make_node(out, (x,), backward)


def downsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    out = x.data[:, ::2, ::2, :].copy()

    def backward(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[:, ::2, ::2, :] = g
            x.accumulate_grad(dx, fresh=True)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# time-series helpers (brain module)


def time_aggregate(x, w, b) -> Tensor:
    """Weighted sum over the time axis: (B, T, H) x (T,) -> (B, H), plus scalar bias."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = np.tensordot(x.data, w.data, axes=([1], [0])) + b.data

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g[:, None, :] * w.data[None, :, None], fresh=True)
        if w.requires_grad:
            w.accumulate_grad(np.tensordot(g, x.data, axes=([0, 1], [0, 2])), fresh=True)
        if b.requires_grad:
            b.accumulate_grad(np.asarray([g.sum()], dtype=b.data.dtype), fresh=True)

    return make_node(out, (x, w, b), backward)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos timestep features; constant w.r.t. parameters."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)
