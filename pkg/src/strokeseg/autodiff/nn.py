"""Spatial operators on ``(batch, channels, *spatial)`` tensors, 1D to 3D.

Convolution is cross-correlation computed through im2col. Large inputs are
processed in chunks along the first output spatial axis so the column buffer
stays bounded; the reduction order inside each chunk is fixed, so results do
not depend on the chunk size beyond matmul blocking.
"""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _record, _unbroadcast, as_tensor

__all__ = [
    "conv_forward",
    "conv_transpose",
    "max_pool",
    "upsample",
    "interpolate",
    "batch_norm",
    "linear_interp_matrix",
    "nearest_index",
    "attention",
]

# elements allowed in one im2col buffer before chunking kicks in
COLUMN_BUDGET = 1 << 23


def _tuple(value, n: int) -> tuple[int, ...]:
    if isinstance(value, (int, np.integer)):
        return (int(value),) * n
    value = tuple(int(v) for v in value)
    if len(value) != n:
        raise ValueError(f"expected {n} values, got {value}")
    return value


def _out_extent(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _row_chunks(rows: int, per_row: int):
    step = max(1, COLUMN_BUDGET // max(per_row, 1))
    for lo in range(0, rows, step):
        yield lo, min(rows, lo + step)


def _columns(xp: np.ndarray, ksize, stride, out_sp, r0: int, r1: int) -> np.ndarray:
    """im2col rows for output rows ``r0:r1`` of the first spatial axis.

    Returns ``(B * rows * prod(out_sp[1:]), C * prod(ksize))``.
    """
    nd = len(ksize)
    B, C = xp.shape[:2]
    lo = r0 * stride[0]
    hi = (r1 - 1) * stride[0] + ksize[0]
    part = xp[:, :, lo:hi]
    win = sliding_window_view(part, ksize, axis=tuple(range(2, 2 + nd)))
    sel = (slice(None), slice(None)) + tuple(
        slice(0, (n - 1) * s + 1, s) for n, s in zip((r1 - r0,) + tuple(out_sp[1:]), stride)
    )
    win = win[sel]
    perm = (0,) + tuple(range(2, 2 + nd)) + (1,) + tuple(range(2 + nd, 2 + 2 * nd))
    return win.transpose(perm).reshape(-1, C * math.prod(ksize))


def _conv_raw(xp: np.ndarray, w: np.ndarray, stride, out_sp) -> np.ndarray:
    """Cross-correlate already padded ``xp`` with ``w``; no bias."""
    B = xp.shape[0]
    cout = w.shape[0]
    ksize = w.shape[2:]
    wm = w.reshape(cout, -1)
    out = np.empty((B, cout) + tuple(out_sp), dtype=np.result_type(xp, w))
    per_row = B * math.prod(out_sp[1:]) * wm.shape[1]
    for r0, r1 in _row_chunks(out_sp[0], per_row):
        cols = _columns(xp, ksize, stride, out_sp, r0, r1)
        res = cols @ wm.T
        res = res.reshape((B, r1 - r0) + tuple(out_sp[1:]) + (cout,))
        out[:, :, r0:r1] = np.moveaxis(res, -1, 1)
    return out


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Adjoint of :func:`_conv_raw` with respect to the padded input."""
    B = g.shape[0]
    cout, cin = w.shape[:2]
    ksize = w.shape[2:]
    nd = len(ksize)
    out_sp = g.shape[2:]
    wm = w.reshape(cout, -1)
    gx = np.zeros(padded_shape, dtype=np.result_type(g, w))
    per_row = B * math.prod(out_sp[1:]) * wm.shape[1]
    for r0, r1 in _row_chunks(out_sp[0], per_row):
        gpart = np.moveaxis(g[:, :, r0:r1], 1, -1).reshape(-1, cout)
        dcols = (gpart @ wm).reshape((B, r1 - r0) + tuple(out_sp[1:]) + (cin,) + tuple(ksize))
        rows = (r1 - r0,) + tuple(out_sp[1:])
        for k in itertools.product(*(range(n) for n in ksize)):
            start0 = r0 * stride[0] + k[0]
            dst = (slice(None), slice(None), slice(start0, start0 + (rows[0] - 1) * stride[0] + 1, stride[0]))
            dst += tuple(
                slice(kk, kk + (n - 1) * s + 1, s) for kk, n, s in zip(k[1:], rows[1:], stride[1:])
            )
            src = dcols[(slice(None),) * (1 + nd) + (slice(None),) + k]
            gx[dst] += np.moveaxis(src, -1, 1)
    return gx


def _conv_weight_grad(xp: np.ndarray, g: np.ndarray, ksize, stride) -> np.ndarray:
    B, cin = xp.shape[:2]
    cout = g.shape[1]
    out_sp = g.shape[2:]
    gw = np.zeros((cout, cin * math.prod(ksize)), dtype=np.result_type(xp, g))
    per_row = B * math.prod(out_sp[1:]) * cin * math.prod(ksize)
    for r0, r1 in _row_chunks(out_sp[0], per_row):
        cols = _columns(xp, ksize, stride, out_sp, r0, r1)
        gpart = np.moveaxis(g[:, :, r0:r1], 1, -1).reshape(-1, cout)
        gw += gpart.T @ cols
    return gw.reshape((cout, cin) + tuple(ksize))


def conv_forward(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation, ``x: B x Cin x S``, ``kernel: Cout x Cin x K``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    nd = x.ndim - 2
    if kernel.ndim != nd + 2:
        raise ValueError(f"kernel rank {kernel.ndim} does not fit input rank {x.ndim}")
    if kernel.shape[1] != x.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    if min(stride) < 1:
        raise ValueError("stride must be >= 1")
    ksize = kernel.shape[2:]
    for n, k, p in zip(x.shape[2:], ksize, padding):
        if k > n + 2 * p:
            raise ValueError(f"kernel {ksize} exceeds padded input {x.shape[2:]}")
    out_sp = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(x.shape[2:], ksize, stride, padding))
    widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
    xp = np.pad(x.data, widths) if any(padding) else x.data
    out = _conv_raw(xp, kernel.data, stride, out_sp)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape((1, -1) + (1,) * nd)
        inputs.append(bias)
    wdata = kernel.data
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, x.shape[2:]))

    def vjp(g):
        gx = _conv_input_grad(g, wdata, xp.shape, stride)[crop] if x.requires_grad else None
        gw = _conv_weight_grad(xp, g, ksize, stride) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))) if bias.requires_grad else None)
        return tuple(grads)

    return _record("conv", out, inputs, vjp)


def conv_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=2, padding=0,
                   output_padding=0) -> Tensor:
    """Transposed convolution, the input-gradient of :func:`conv_forward`.

    ``kernel`` has layout ``Cin x Cout x K``; the output extent per axis is
    ``(S - 1) * stride - 2 * padding + K + output_padding``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    nd = x.ndim - 2
    if kernel.shape[0] != x.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[0]}")
    stride = _tuple(stride, nd)
    padding = _tuple(padding, nd)
    output_padding = _tuple(output_padding, nd)
    ksize = kernel.shape[2:]
    out_sp = tuple(
        (n - 1) * s - 2 * p + k + op
        for n, s, p, k, op in zip(x.shape[2:], stride, padding, ksize, output_padding)
    )
    B, cout = x.shape[0], kernel.shape[1]
    padded = (B, cout) + tuple(n + 2 * p for n, p in zip(out_sp, padding))
    full = _conv_input_grad(x.data, kernel.data, padded, stride)
    crop = (slice(None), slice(None)) + tuple(slice(p, p + n) for p, n in zip(padding, out_sp))
    out = np.ascontiguousarray(full[crop])
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape((1, -1) + (1,) * nd)
        inputs.append(bias)
    xdata, wdata = x.data, kernel.data

    def vjp(g):
        widths = ((0, 0), (0, 0)) + tuple((p, p) for p in padding)
        gp = np.pad(g, widths) if any(padding) else g
        gx = _conv_raw(gp, wdata, stride, xdata.shape[2:]) if x.requires_grad else None
        gw = _conv_weight_grad(gp, xdata, ksize, stride) if kernel.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + tuple(range(2, 2 + nd))) if bias.requires_grad else None)
        return tuple(grads)

    return _record("conv_transpose", out, inputs, vjp)


def max_pool(x: Tensor, window=2, stride=None) -> Tensor:
    """Max over windows; the gradient goes to the first maximum in row-major order."""
    x = as_tensor(x)
    nd = x.ndim - 2
    window = _tuple(window, nd)
    stride = window if stride is None else _tuple(stride, nd)
    sp = x.shape[2:]
    if any(w > n for w, n in zip(window, sp)):
        raise ValueError(f"pool window {window} larger than input {sp}")
    out_sp = tuple((n - w) // s + 1 for n, w, s in zip(sp, window, stride))
    win = sliding_window_view(x.data, window, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(0, (o - 1) * s + 1, s) for o, s in zip(out_sp, stride))]
    flat = win.reshape(x.shape[:2] + out_sp + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(shape, dtype=dtype)
        offsets = np.unravel_index(arg, window)
        grids = np.meshgrid(*(np.arange(n) for n in x.shape[:2] + out_sp), indexing="ij")
        index = tuple(grids[:2]) + tuple(
            grids[2 + i] * stride[i] + offsets[i] for i in range(nd)
        )
        if all(s >= w for s, w in zip(stride, window)):
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record("max_pool", np.ascontiguousarray(out), (x,), vjp)


def linear_interp_matrix(n_in: int, n_out: int, scale: float | None = None) -> np.ndarray:
    """``n_out x n_in`` 1-D linear interpolation weights, half-pixel centres.

    Source coordinate for output ``i`` is ``(i + 0.5) * scale - 0.5`` clamped
    below at zero (the align-corners=false convention); ``scale`` defaults to
    ``n_in / n_out``.
    """
    if scale is None:
        scale = n_in / n_out
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Nearest source index per output sample, half-pixel centred."""
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def _apply_along(data: np.ndarray, mat: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(data, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def interpolate(x: Tensor, size: Sequence[int] | None = None, factor=None) -> Tensor:
    """Separable (bi/tri)linear resize of every spatial axis."""
    x = as_tensor(x)
    nd = x.ndim - 2
    sp = x.shape[2:]
    if size is None:
        if factor is None:
            raise ValueError("either size or factor is required")
        factors = _tuple(factor, nd) if not isinstance(factor, float) else (factor,) * nd
        if min(factors) < 1:
            raise ValueError("upsampling factor must be >= 1")
        size = tuple(int(n * f) for n, f in zip(sp, factors))
        scales = tuple(1.0 / f for f in factors)
    else:
        size = _tuple(size, nd)
        scales = tuple(n / m for n, m in zip(sp, size))
    mats = [linear_interp_matrix(n, m, s).astype(x.dtype) for n, m, s in zip(sp, size, scales)]
    out = x.data
    for i, m in enumerate(mats):
        if m.shape[0] != m.shape[1] or not np.array_equal(m, np.eye(m.shape[0])):
            out = _apply_along(out, m, 2 + i)
    out = np.ascontiguousarray(out)

    def vjp(g):
        for i, m in enumerate(mats):
            g = _apply_along(g, m.T, 2 + i)
        return (g,)

    return _record("interpolate", out, (x,), vjp)


def upsample(x: Tensor, mode: str = "bilinear", factor=2, size=None, kernel: Tensor | None = None,
             bias: Tensor | None = None, padding=0, output_padding=0) -> Tensor:
    """Spatial upsampling by interpolation or learned transposed convolution."""
    if mode in ("bilinear", "trilinear", "linear"):
        expected = {"bilinear": 2, "trilinear": 3}.get(mode)
        if expected is not None and x.ndim - 2 != expected:
            raise ValueError(f"{mode} needs {expected} spatial axes, got {x.ndim - 2}")
        return interpolate(x, size=size, factor=None if size is not None else factor)
    if mode == "transposed_conv":
        if kernel is None:
            raise ValueError("transposed_conv upsampling needs a kernel")
        return conv_transpose(x, kernel, bias, stride=factor, padding=padding, output_padding=output_padding)
    raise ValueError(f"unknown upsample mode {mode!r}")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over batch and spatial axes.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like the usual frameworks).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        count = x.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gdata = gamma.data

    def vjp(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gdata.reshape(bshape)
            if training:
                m1 = dxhat.mean(axis=axes, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
                gx = (dxhat - m1 - xhat * m2) * inv.reshape(bshape)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _record("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), vjp)


# elements allowed in one block of attention scores
ATTENTION_BUDGET = 1 << 22


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes, fused.

    Queries are processed in blocks and the probabilities are recomputed in
    the backward pass, so memory grows with ``block x n_keys`` rather than
    ``n_queries x n_keys``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    qd, kd, vd = q.data, k.data, v.data
    if np.isnan(qd).any() or np.isnan(kd).any():
        raise ValueError("attention received NaN input")
    lead = np.broadcast_shapes(qd.shape[:-2], kd.shape[:-2])
    nq, nk = qd.shape[-2], kd.shape[-2]
    step = max(1, ATTENTION_BUDGET // max(1, math.prod(lead) * nk))
    kt = np.swapaxes(kd, -1, -2)

    def probs(lo, hi):
        s = (qd[..., lo:hi, :] @ kt) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        return s

    out = np.empty(lead + (nq, vd.shape[-1]), dtype=np.result_type(qd, vd))
    for lo in range(0, nq, step):
        hi = min(nq, lo + step)
        out[..., lo:hi, :] = probs(lo, hi) @ vd

    def vjp(g):
        gq = np.empty(lead + qd.shape[-2:], dtype=qd.dtype)
        gk = np.zeros(lead + kd.shape[-2:], dtype=kd.dtype)
        gv = np.zeros(lead + vd.shape[-2:], dtype=vd.dtype)
        vt = np.swapaxes(vd, -1, -2)
        for lo in range(0, nq, step):
            hi = min(nq, lo + step)
            p = probs(lo, hi)
            gc = g[..., lo:hi, :]
            gv += np.swapaxes(p, -1, -2) @ gc
            dp = gc @ vt
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
            gq[..., lo:hi, :] = ds @ kd
            gk += np.swapaxes(ds, -1, -2) @ qd[..., lo:hi, :]
        return (_unbroadcast(gq, qd.shape), _unbroadcast(gk, kd.shape), _unbroadcast(gv, vd.shape))

    return _record("attention", out, (q, k, v), vjp)
