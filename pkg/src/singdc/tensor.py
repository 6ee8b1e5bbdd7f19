"""Differentiable primitives with hand-written backward passes.

Every forward function returns ``(out, cache)`` and has a matching
``*_backward(dout, cache)``. Arrays are plain numpy arrays in NCHW layout
(H indexes frequency, W indexes time).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Raised when operand extents do not agree."""


@dataclass
class Param:
    """A trainable value together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0

    @property
    def size(self) -> int:
        return int(self.value.size)


def same_padding(kh: int, kw: int) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding keeping H, W unchanged.

    The odd remainder goes to the bottom/right.
    """
    top = (kh - 1) // 2
    left = (kw - 1) // 2
    return top, kh - 1 - top, left, kw - 1 - left


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ----------------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------------

def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Stride-1 cross-correlation with "same" zero padding.

    x: (N, Cin, H, W), w: (Cout, Cin, kh, kw), b: (Cout,) -> (N, Cout, H, W)
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weights, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weights expect {wcin}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")
    top, bottom, left, right = same_padding(kh, kw)
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    w2 = w.reshape(cout, -1)
    dtype = np.result_type(x, w)
    out = np.empty((n, cout, h * wd), dtype=dtype)
    cols = np.empty((cin, kh * kw, h, wd), dtype=dtype)
    # im2col one sample at a time keeps the column buffer small
    for s in range(n):
        _im2col(xp[s], kh, kw, cols)
        np.matmul(w2, cols.reshape(cin * kh * kw, h * wd), out=out[s])
        out[s] += b[:, None]
    return out.reshape(n, cout, h, wd), (xp, w, x.shape)


def _im2col(xs, kh, kw, cols):
    h, w = cols.shape[2:]
    for i in range(kh):
        for j in range(kw):
            cols[:, i * kw + j] = xs[:, i:i + h, j:j + w]


def conv2d_backward(dout: np.ndarray, cache):
    xp, w, xshape = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    top, _, left, _ = same_padding(kh, kw)
    d = dout.reshape(n, cout, h * wd)
    w2 = w.reshape(cout, -1)
    dw2 = np.zeros_like(w2)
    dxp = np.zeros_like(xp)
    cols = np.empty((cin, kh * kw, h, wd), dtype=xp.dtype)
    for s in range(n):
        _im2col(xp[s], kh, kw, cols)
        dw2 += d[s] @ cols.reshape(cin * kh * kw, h * wd).T
        dcols = (w2.T @ d[s]).reshape(cin, kh * kw, h, wd)
        for i in range(kh):
            for j in range(kw):
                dxp[s, :, i:i + h, j:j + wd] += dcols[:, i * kw + j]
    db = d.sum(axis=(0, 2)).astype(w.dtype)
    dx = np.ascontiguousarray(dxp[:, :, top:top + h, left:left + wd])
    return dx, dw2.reshape(w.shape), db


# ----------------------------------------------------------------------------
# pooling
# ----------------------------------------------------------------------------

def maxpool2d(x: np.ndarray, ph: int, pw: int):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    if ph < 1 or pw < 1:
        raise ShapeError("pool extents must be positive")
    if ph > h or pw > w:
        raise ShapeError(f"pool {ph}x{pw} larger than input {h}x{w}")
    ho, wo = h // ph, w // pw
    win = x[:, :, :ho * ph, :wo * pw].reshape(n, c, ho, ph, wo, pw)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape, ph, pw)


def maxpool2d_backward(dout: np.ndarray, cache):
    arg, xshape, ph, pw = cache
    n, c, h, w = xshape
    ho, wo = dout.shape[2:]
    dwin = np.zeros((n, c, ho, wo, ph * pw), dtype=dout.dtype)
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :, :ho * ph, :wo * pw] = dwin.reshape(n, c, ho * ph, wo * pw)
    return dx


def global_avg_pool(x: np.ndarray):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout: np.ndarray, xshape):
    h, w = xshape[2:]
    return np.broadcast_to((dout / (h * w))[:, :, None, None], xshape).copy()


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

def batchnorm2d(x, gamma, beta, running_mean, running_var, training: bool,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics are updated in place.
    """
    c = x.shape[1]
    if c == 0:
        raise ShapeError("batchnorm2d: zero-extent channel dimension")
    for name, arr in (("gamma", gamma), ("beta", beta),
                      ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batchnorm2d: {name} shape {arr.shape} != ({c},)")
    if training:
        m = x.size // c
        mean = x.mean(axis=(0, 2, 3))
        xhat = x - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", xhat, xhat) / m
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        # running variance tracks the unbiased estimate
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
        xhat = x - mean.astype(x.dtype)[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None]
    out += beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, training)


def batchnorm2d_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = np.einsum("nchw,nchw->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not training:
        return dout * scale, dgamma, dbeta
    m = dout.size // dout.shape[1]
    # dx = gamma * inv_std * (dout - mean(dout) - xhat * mean(dout * xhat))
    dx = xhat * (-dgamma / m)[None, :, None, None]
    dx += dout
    dx -= (dbeta / m)[None, :, None, None]
    dx *= scale
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------------
# elementwise and dense
# ----------------------------------------------------------------------------

def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity (same object) in eval mode."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / (1 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


def linear(x, w, b):
    """x: (N, Din), w: (Dout, Din), b: (Dout,) -> (N, Dout)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: cannot apply weights {w.shape} to input {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
    return x @ w.T + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


# ----------------------------------------------------------------------------
# loss
# ----------------------------------------------------------------------------

def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets, sample_weights=None):
    """Weighted-mean cross entropy.

    Returns ``(loss, dlogits)`` where loss = sum_i w_i * ce_i / sum_i w_i.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValueError(f"targets must lie in [0, {c})")
    if sample_weights is None:
        sample_weights = np.ones(n, dtype=logits.dtype)
    wts = np.asarray(sample_weights, dtype=logits.dtype)
    if wts.shape != (n,):
        raise ShapeError(f"sample_weights shape {wts.shape} != ({n},)")
    if np.any(wts < 0):
        raise ValueError("sample weights must be nonnegative")
    total = wts.sum()
    if total == 0:
        raise ValueError("all sample weights in the batch are zero")
    logp = log_softmax(logits)
    ce = -logp[np.arange(n), targets]
    loss = float((wts * ce).sum() / total)
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1
    dlogits *= (wts / total)[:, None]
    return loss, dlogits
