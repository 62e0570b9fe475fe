"""Differentiable building blocks beyond elementwise arithmetic."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    DimensionError,
    Tensor,
    _MAC_COUNTERS,
    _record_macs,
    as_tensor,
    make_result,
)

NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


# -------------------------------------------------------------- activations
def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    k = math.sqrt(2.0 / math.pi)
    u = k * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = k * (1.0 + 3 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B x classes)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy expects (B, C) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    ls = log_softmax(logits, axis=1)
    batch = np.arange(labels.shape[0])
    picked = ls[batch, labels]
    return -picked.mean()


# ------------------------------------------------------------ normalization
def standardize(x: Tensor, axes, eps: float = NORM_EPS):
    """Zero-mean, unit-variance over ``axes`` (biased variance, eps inside the root).

    Returns the standardized tensor together with the batch mean and variance
    as plain arrays so callers can maintain running statistics.
    """
    axes = tuple(ax % x.ndim for ax in axes)
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat, (x,), backward), mu, var


def _bn_axes(ndim: int):
    # channel/feature axis is 1; statistics run over every other axis
    if ndim < 2:
        raise DimensionError("batch_norm needs at least (batch, features)")
    return (0,) + tuple(range(2, ndim))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = NORM_EPS,
) -> Tensor:
    """Batch normalization over every axis except axis 1.

    In training mode the running statistics are updated in place with the
    unbiased batch variance.
    """
    axes = _bn_axes(x.ndim)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if training:
        xhat, mu, var = standardize(x, axes, eps)
        n = x.data.size // x.shape[1]
        unbiased = var * (n / (n - 1)) if n > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased.reshape(-1)
    else:
        shift = running_mean.reshape(bshape).astype(x.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x - Tensor(shift)) * Tensor(inv)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    xhat, _, _ = standardize(x, (-1,), eps)
    return xhat * gamma + beta


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in_features, out_features)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x @ weight
    return out + bias if bias is not None else out


# ------------------------------------------------------------- convolution
def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*Ho*Wo, kh*kw*C); columns ordered (kh, kw, C) so each tap is contiguous."""
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, _, ho, wo = windows.shape[:4]
    return np.ascontiguousarray(windows.transpose(0, 2, 3, 4, 5, 1)).reshape(batch * ho * wo, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) with (Cout, Cin, kh, kw) weights, via im2col."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d input {x.shape} does not match weight {weight.shape}")
    batch, cin, height, width = x.shape
    cout, _, kh, kw = weight.shape
    hp, wp = height + 2 * padding, width + 2 * padding
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    if _MAC_COUNTERS:
        _record_macs(out.size * wmat.shape[1])
    if bias is not None:
        out += bias.data
    out = out.reshape(batch, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            gx = _conv_input_grad(g, weight.data, stride, padding, (height, width), g2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return make_result(out, (x, weight, bias) if bias is not None else (x, weight), backward)


def _conv_input_grad(g, w, stride, padding, hw, g2):
    cout, cin, kh, kw = w.shape
    batch, _, ho, wo = g.shape
    height, width = hw
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        # correlate the padded output gradient with the flipped, transposed kernel
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding,) * 2, (kw - 1 - padding,) * 2))
        wt = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
        gx = (_im2col(gp, kh, kw, 1) @ wt.T).reshape(batch, gp.shape[2] - kh + 1, gp.shape[3] - kw + 1, cin)
        return gx[:, :height, :width].transpose(0, 3, 1, 2)
    hp, wp = height + 2 * padding, width + 2 * padding
    dcols = (g2 @ w.transpose(0, 2, 3, 1).reshape(cout, -1)).reshape(batch, ho, wo, kh, kw, cin)
    dxp = np.zeros((batch, hp, wp, cin), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
    dxp = dxp.transpose(0, 3, 1, 2)
    return dxp[:, :, padding:padding + height, padding:padding + width] if padding else dxp


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    b, c, h, w = x.shape

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    b, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"avg_pool2d factor {factor} does not divide {h}x{w}")
    out = x.data.reshape(b, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g):
        return (g.repeat(factor, axis=2).repeat(factor, axis=3) / (factor * factor),)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------- bilinear sampling
def grid_sample(img: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling with border clamping.

    ``img`` is (B, C, H, W); ``coords`` is (B, Ho, Wo, 2) holding pixel-unit
    (x, y) source positions. Output is (B, C, Ho, Wo). Differentiable with
    respect to both inputs; the coordinate gradient is zero where a
    coordinate was clamped.
    """
    img, coords = as_tensor(img), as_tensor(coords)
    if img.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2 or coords.shape[0] != img.shape[0]:
        raise DimensionError(f"grid_sample expects (B,C,H,W) and (B,Ho,Wo,2), got {img.shape} and {coords.shape}")
    batch, chans, height, width = img.shape
    _, ho, wo, _ = coords.shape
    cx = coords.data[..., 0].reshape(batch, -1)
    cy = coords.data[..., 1].reshape(batch, -1)
    x = np.clip(cx, 0, width - 1)
    y = np.clip(cy, 0, height - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = (x - x0).astype(img.dtype)[:, None, :]
    wy = (y - y0).astype(img.dtype)[:, None, :]

    flat = img.data.reshape(batch, chans, height * width)
    idx = [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1]
    ia, ib, ic, id_ = (np.take_along_axis(flat, i[:, None, :], axis=2) for i in idx)
    wa = (1 - wx) * (1 - wy)
    wb = wx * (1 - wy)
    wc = (1 - wx) * wy
    wd = wx * wy
    out = ia * wa + ib * wb + ic * wc + id_ * wd

    def backward(g):
        g = g.reshape(batch, chans, -1)
        gimg = gcoords = None
        if img.requires_grad:
            offsets = (np.arange(batch * chans) * height * width).reshape(batch, chans, 1)
            where = np.concatenate([(i[:, None, :] + offsets).ravel() for i in idx])
            amount = np.concatenate([(g * w).ravel() for w in (wa, wb, wc, wd)])
            total = np.bincount(where, weights=amount, minlength=batch * chans * height * width)
            gimg = total.reshape(img.shape).astype(img.dtype)
        if coords.requires_grad:
            dx = ((ib - ia) * (1 - wy) + (id_ - ic) * wy) * g
            dy = ((ic - ia) * (1 - wx) + (id_ - ib) * wx) * g
            dx = dx.sum(axis=1) * ((cx >= 0) & (cx <= width - 1))
            dy = dy.sum(axis=1) * ((cy >= 0) & (cy <= height - 1))
            gcoords = np.stack([dx, dy], axis=-1).reshape(coords.shape).astype(coords.dtype)
        return gimg, gcoords

    return make_result(out.reshape(batch, chans, ho, wo), (img, coords), backward)


def identity_grid(height: int, width: int, dtype=None) -> np.ndarray:
    """(H, W, 2) array whose entry (y, x) is (x, y)."""
    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.stack([xs, ys], axis=-1)
    return grid.astype(dtype or np.float64)


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights, pixel-centre aligned, border clamped."""
    pos = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), lo), 1 - frac)
    np.add.at(mat, (np.arange(n_out), hi), frac)
    return mat


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Resize (B, C, h, w) to (B, C, height, width) with pixel-centre alignment.

    Separable form of bilinear sampling at the resized pixel centres, with the
    same border clamping as :func:`grid_sample`.
    """
    h, w = x.shape[-2:]
    rows = Tensor(_interp_matrix(height, h).astype(x.dtype))
    cols = Tensor(_interp_matrix(width, w).T.astype(x.dtype))
    return rows @ x @ cols


def diff(x: Tensor, axis: int = -1) -> Tensor:
    """Forward difference ``x[k+1] - x[k]`` along ``axis``."""
    axis = axis % x.ndim
    if x.shape[axis] < 2:
        raise DimensionError(f"diff needs at least 2 entries along axis {axis}, got shape {x.shape}")
    out = np.diff(x.data, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        hi = [slice(None)] * x.ndim
        lo = [slice(None)] * x.ndim
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        full[tuple(hi)] += g
        full[tuple(lo)] -= g
        return (full,)

    return make_result(out, (x,), backward)
