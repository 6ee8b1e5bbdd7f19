"""Modulated deformable convolution.

Each output location samples the input at ``p0 + p_m + offset_m(p0)`` for every
kernel tap ``m`` (bilinear interpolation, zero outside the map), scales the
sample by ``2 * sigmoid(mask_logit_m(p0))`` and applies the tap weight. Offsets
and mask logits come from an ordinary "same" convolution over the input with
``3 * kh * kw`` output channels laid out as

    [dy_0, dx_0, dy_1, dx_1, ..., dy_{M-1}, dx_{M-1}, logit_0, ..., logit_{M-1}]

with taps enumerated row-major over the kernel. The offset branch starts at
zero, where the layer reduces exactly to standard convolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Param, ShapeError, conv2d, conv2d_backward, kaiming_uniform, same_padding

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _bilinear_weights(ly, lx):
    return ((1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx)


def sample_points(x: np.ndarray, py: np.ndarray, px: np.ndarray):
    """Bilinearly sample ``x`` (N, C, H, W) at fractional points (N, P).

    Returns values of shape (N, C, P) and a cache for :func:`sample_points_backward`.
    """
    n, c, h, w = x.shape
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = (py - y0).astype(x.dtype)
    lx = (px - x0).astype(x.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    flat = x.reshape(n, c, h * w)
    corners = []
    out = np.zeros((n, c, py.shape[1]), dtype=x.dtype)
    for (dy, dx), wt in zip(_CORNERS, _bilinear_weights(ly, lx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        corners.append((idx, valid))
        v = np.take_along_axis(flat, idx[:, None, :], axis=2)
        out += v * (wt * valid)[:, None, :]
    return out, (x, corners, ly, lx)


def sample_points_backward(dout: np.ndarray, cache):
    """Gradients of :func:`sample_points` w.r.t. the map and the coordinates.

    Coordinate gradients are the one-sided (right) derivatives at integer points.
    """
    x, corners, ly, lx = cache
    n, c, h, w = x.shape
    p = dout.shape[2]
    flat = x.reshape(n, c, h * w)
    base = (np.arange(n * c, dtype=np.int64) * (h * w)).reshape(n, c, 1)
    dx_flat = np.zeros(n * c * h * w, dtype=np.float64)
    # d value / d ly and d value / d lx for corners 00, 01, 10, 11
    dly = (-(1 - lx), -lx, 1 - lx, lx)
    dlx = (-(1 - ly), 1 - ly, -ly, ly)
    gy = np.zeros((n, p), dtype=x.dtype)
    gx = np.zeros((n, p), dtype=x.dtype)
    for (idx, valid), wt, ay, ax in zip(corners, _bilinear_weights(ly, lx), dly, dlx):
        vmask = valid[:, None, :]
        contrib = dout * (wt * valid)[:, None, :]
        dx_flat += np.bincount((base + idx[:, None, :]).ravel(), weights=contrib.ravel(),
                               minlength=dx_flat.size)
        v = np.take_along_axis(flat, idx[:, None, :], axis=2) * vmask
        proj = (dout * v).sum(axis=1)
        gy += proj * ay
        gx += proj * ax
    return dx_flat.reshape(x.shape).astype(x.dtype), gy, gx


def bilinear_sample(fmap: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample a (C, H, W) map at one fractional location; zero outside the map."""
    vals, _ = sample_points(fmap[None], np.array([[y]], dtype=np.float64),
                            np.array([[x]], dtype=np.float64))
    return vals[0, :, 0]


def bilinear_sample_grad(fmap: np.ndarray, y: float, x: float, dvals: np.ndarray):
    """Backward of :func:`bilinear_sample`: returns (dmap, dy, dx)."""
    _, cache = sample_points(fmap[None], np.array([[y]], dtype=np.float64),
                             np.array([[x]], dtype=np.float64))
    dmap, gy, gx = sample_points_backward(np.asarray(dvals, dtype=fmap.dtype)[None, :, None], cache)
    return dmap[0], float(gy[0, 0]), float(gx[0, 0])


# ----------------------------------------------------------------------------
# functional deformable convolution
# ----------------------------------------------------------------------------

def deform_conv2d(x, w, b, offsets, mask_logits):
    """x: (N,Cin,H,W), w: (Cout,Cin,kh,kw), offsets: (N,2M,H,W), mask_logits: (N,M,H,W)."""
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    m_taps = kh * kw
    if wcin != cin:
        raise ShapeError(f"deform_conv2d: input has {cin} channels, weights expect {wcin}")
    if offsets.shape != (n, 2 * m_taps, h, wd):
        raise ShapeError(f"offsets shape {offsets.shape} != {(n, 2 * m_taps, h, wd)}")
    if mask_logits.shape != (n, m_taps, h, wd):
        raise ShapeError(f"mask logits shape {mask_logits.shape} != {(n, m_taps, h, wd)}")
    top, _, left, _ = same_padding(kh, kw)
    p = h * wd
    x = np.ascontiguousarray(x)
    off = np.ascontiguousarray(offsets, dtype=x.dtype).reshape(n, m_taps, 2, p)
    sig = sigmoid(mask_logits).reshape(n, m_taps, p)
    w2 = w.reshape(cout, cin * m_taps)
    out = np.empty((n, cout, p), dtype=np.result_type(x, w))
    samples = np.empty((n, cin, m_taps, p), dtype=x.dtype)
    for s in range(n):
        _kernels.deform_gather(x[s], off[s], kh, kw, top, left, samples[s])
        np.matmul(w2, (samples[s] * (2 * sig[s])).reshape(cin * m_taps, p), out=out[s])
        out[s] += b[:, None]
    return out.reshape(n, cout, h, wd), (x, w, off, sig, samples)


def deform_conv2d_backward(dout, cache):
    """Returns (dx, dw, db, doffsets, dmask_logits)."""
    x, w, off, sig, samples = cache
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    m_taps = kh * kw
    top, _, left, _ = same_padding(kh, kw)
    p = h * wd
    d = dout.reshape(n, cout, p)
    w2 = w.reshape(cout, cin * m_taps)
    dx = np.zeros_like(x)
    dw2 = np.zeros_like(w2)
    doff = np.zeros((n, m_taps, 2, p), dtype=x.dtype)
    dlogit = np.empty((n, m_taps, p), dtype=x.dtype)
    for s in range(n):
        mod = 2 * sig[s]
        smp = samples[s]
        dw2 += d[s] @ (smp * mod).reshape(cin * m_taps, p).T
        dsm = (w2.T @ d[s]).reshape(cin, m_taps, p)
        dmod = np.einsum("cmp,cmp->mp", dsm, smp)
        dlogit[s] = dmod * 2 * sig[s] * (1 - sig[s])
        ds = np.ascontiguousarray(dsm * mod, dtype=x.dtype)
        _kernels.deform_scatter(x[s], off[s], ds, kh, kw, top, left, dx[s], doff[s])
    db = d.sum(axis=(0, 2)).astype(w.dtype)
    return (dx, dw2.reshape(w.shape), db,
            doff.reshape(n, 2 * m_taps, h, wd), dlogit.reshape(n, m_taps, h, wd))


# ----------------------------------------------------------------------------
# layer
# ----------------------------------------------------------------------------

@dataclass
class OffsetField:
    offsets: np.ndarray  # (N, 2M, H, W), (dy, dx) pairs per tap
    masks: np.ndarray    # (N, M, H, W), sigmoid outputs in (0, 1)


class DeformConv2d:
    """Deformable convolution layer with its own offset/modulation branch."""

    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float32):
        kh, kw = kernel
        self.kernel = (kh, kw)
        self.m_taps = kh * kw
        fan_in = in_channels * kh * kw
        self.weight = Param(kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype))
        self.bias = Param(np.zeros(out_channels, dtype=dtype))
        self.offset_weight = Param(np.zeros((3 * self.m_taps, in_channels, kh, kw), dtype=dtype))
        self.offset_bias = Param(np.zeros(3 * self.m_taps, dtype=dtype))
        self._cache = None

    def params(self) -> dict[str, Param]:
        return {"weight": self.weight, "bias": self.bias,
                "offset.weight": self.offset_weight, "offset.bias": self.offset_bias}

    def _branch(self, x):
        raw, bcache = conv2d(x, self.offset_weight.value, self.offset_bias.value)
        return raw[:, :2 * self.m_taps], raw[:, 2 * self.m_taps:], bcache

    def offset_field(self, x) -> OffsetField:
        offsets, logits, _ = self._branch(x)
        return OffsetField(offsets, sigmoid(logits))

    def forward(self, x, training=False, rng=None):
        offsets, logits, bcache = self._branch(x)
        out, dcache = deform_conv2d(x, self.weight.value, self.bias.value, offsets, logits)
        self._cache = (bcache, dcache)
        return out

    def backward(self, dout):
        bcache, dcache = self._cache
        dx, dw, db, doff, dlogit = deform_conv2d_backward(dout, dcache)
        self.weight.grad += dw
        self.bias.grad += db
        draw = np.concatenate([doff, dlogit], axis=1)
        dxb, dwb, dbb = conv2d_backward(draw, bcache)
        self.offset_weight.grad += dwb
        self.offset_bias.grad += dbb
        self._cache = None
        return dx + dxb
