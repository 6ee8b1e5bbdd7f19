"""Central finite-difference checks of the hand-written backward passes.

Each case draws random operands, reduces the op output to a scalar with a fixed
random projection ``L = sum(R * op(inputs))`` and compares ``backward(R)``
against ``(L(x + eps) - L(x - eps)) / (2 eps)`` for every input element.

Element error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``
where ``floor`` is 1e-3 of the largest numeric gradient magnitude of that input,
so entries that are zero up to rounding do not divide by ~0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .deform import DeformConv2d, deform_conv2d, deform_conv2d_backward, sample_points, sample_points_backward

DEFAULTS = {32: (1e-3, 1e-2), 64: (1e-6, 1e-3)}  # bits -> (eps, tolerance)


@dataclass
class GradcheckReport:
    op: str
    seed: int
    max_rel_error: float
    passed: bool
    per_input: dict[str, float] = field(default_factory=dict)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = max(1e-3 * np.abs(n).max(), 1e-12)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def gradcheck(f, inputs: dict[str, np.ndarray], analytic: dict[str, np.ndarray], eps, tol,
              op="op", seed=0) -> GradcheckReport:
    """Compare analytic gradients with central differences of ``f()`` over ``inputs``."""
    per = {}
    for name, x in inputs.items():
        per[name] = relative_error(analytic[name], numerical_gradient(f, x, eps))
    worst = max(per.values()) if per else 0.0
    return GradcheckReport(op, seed, worst, worst < tol, per)


# ----------------------------------------------------------------------------
# cases: each returns (f, inputs, analytic gradients)
# ----------------------------------------------------------------------------

def _proj(rng, shape, dtype):
    return rng.standard_normal(shape).astype(dtype)


def case_conv2d(rng, dtype, corrupt=False):
    x = rng.standard_normal((2, 3, 5, 4)).astype(dtype)
    w = rng.standard_normal((4, 3, 3, 1)).astype(dtype)
    b = rng.standard_normal(4).astype(dtype)
    r = _proj(rng, (2, 4, 5, 4), dtype)
    f = lambda: float((T.conv2d(x, w, b)[0] * r).sum(dtype=np.float64))
    dx, dw, db = T.conv2d_backward(r, T.conv2d(x, w, b)[1])
    if corrupt:
        dx, dw, db = -dx, -dw, -db
    return f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}


def case_maxpool(rng, dtype):
    # distinct, well-separated values keep every window's argmax stable under eps
    x = (rng.permutation(2 * 2 * 7 * 6).reshape(2, 2, 7, 6) * 0.1).astype(dtype)
    r = _proj(rng, (2, 2, 3, 3), dtype)
    f = lambda: float((T.maxpool2d(x, 2, 2)[0] * r).sum(dtype=np.float64))
    return f, {"x": x}, {"x": T.maxpool2d_backward(r, T.maxpool2d(x, 2, 2)[1])}


def case_batchnorm(rng, dtype):
    x = rng.standard_normal((2, 3, 4, 4)).astype(dtype)
    g = rng.uniform(0.5, 1.5, 3).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    r = _proj(rng, x.shape, dtype)

    def run():
        return T.batchnorm2d(x, g, b, np.zeros(3, dtype), np.ones(3, dtype), training=True)

    f = lambda: float((run()[0] * r).sum(dtype=np.float64))
    dx, dg, db = T.batchnorm2d_backward(r, run()[1])
    return f, {"x": x, "gamma": g, "beta": b}, {"x": dx, "gamma": dg, "beta": db}


def case_batchnorm_eval(rng, dtype):
    x = rng.standard_normal((2, 3, 4, 4)).astype(dtype)
    g = rng.uniform(0.5, 1.5, 3).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    rm = rng.standard_normal(3).astype(dtype)
    rv = rng.uniform(0.5, 2.0, 3).astype(dtype)
    r = _proj(rng, x.shape, dtype)
    run = lambda: T.batchnorm2d(x, g, b, rm, rv, training=False)
    f = lambda: float((run()[0] * r).sum(dtype=np.float64))
    dx, dg, db = T.batchnorm2d_backward(r, run()[1])
    return f, {"x": x, "gamma": g, "beta": b}, {"x": dx, "gamma": dg, "beta": db}


def case_relu(rng, dtype):
    x = rng.uniform(0.1, 2.0, (3, 7)) * rng.choice([-1, 1], (3, 7))
    x = x.astype(dtype)
    r = _proj(rng, x.shape, dtype)
    f = lambda: float((T.relu(x)[0] * r).sum(dtype=np.float64))
    return f, {"x": x}, {"x": T.relu_backward(r, T.relu(x)[1])}


def case_linear(rng, dtype):
    x = rng.standard_normal((2, 3)).astype(dtype)
    w = rng.standard_normal((2, 3)).astype(dtype)
    b = rng.standard_normal(2).astype(dtype)
    r = _proj(rng, (2, 2), dtype)
    f = lambda: float((T.linear(x, w, b)[0] * r).sum(dtype=np.float64))
    dx, dw, db = T.linear_backward(r, T.linear(x, w, b)[1])
    return f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db}


def case_global_avg_pool(rng, dtype):
    x = rng.standard_normal((2, 3, 4, 5)).astype(dtype)
    r = _proj(rng, (2, 3), dtype)
    f = lambda: float((T.global_avg_pool(x)[0] * r).sum(dtype=np.float64))
    return f, {"x": x}, {"x": T.global_avg_pool_backward(r, x.shape)}


def case_dropout(rng, dtype):
    x = rng.standard_normal((3, 8)).astype(dtype)
    keep = T.dropout(x, 0.3, True, np.random.default_rng(int(rng.integers(1 << 31))))[1]
    r = _proj(rng, x.shape, dtype)
    f = lambda: float((x * keep * r).sum(dtype=np.float64))
    return f, {"x": x}, {"x": T.dropout_backward(r, keep)}


def case_softmax_ce(rng, dtype):
    logits = rng.standard_normal((4, 5)).astype(dtype)
    targets = rng.integers(0, 5, 4)
    wts = rng.uniform(0.1, 2.0, 4).astype(dtype)
    f = lambda: T.softmax_cross_entropy(logits, targets, wts)[0]
    return f, {"logits": logits}, {"logits": T.softmax_cross_entropy(logits, targets, wts)[1]}


def _fractional(rng, shape, lo=-1.5, hi=1.5):
    """Offsets whose fractional part lies in [0.2, 0.8], away from bilinear kinks."""
    whole = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), shape)
    return whole + rng.uniform(0.2, 0.8, shape)


def case_bilinear(rng, dtype):
    x = rng.standard_normal((1, 3, 5, 6)).astype(dtype)
    py = (rng.integers(-1, 5, (1, 8)) + rng.uniform(0.2, 0.8, (1, 8))).astype(dtype)
    px = (rng.integers(-1, 6, (1, 8)) + rng.uniform(0.2, 0.8, (1, 8))).astype(dtype)
    r = _proj(rng, (1, 3, 8), dtype)
    f = lambda: float((sample_points(x, py, px)[0] * r).sum(dtype=np.float64))
    dxm, gy, gx = sample_points_backward(r, sample_points(x, py, px)[1])
    return f, {"map": x, "y": py, "x": px}, {"map": dxm, "y": gy, "x": gx}


def case_deform_conv(rng, dtype):
    x = rng.standard_normal((1, 2, 6, 5)).astype(dtype)
    w = rng.standard_normal((3, 2, 1, 3)).astype(dtype)
    b = rng.standard_normal(3).astype(dtype)
    off = _fractional(rng, (1, 6, 6, 5)).astype(dtype)
    logits = rng.standard_normal((1, 3, 6, 5)).astype(dtype)
    r = _proj(rng, (1, 3, 6, 5), dtype)
    run = lambda: deform_conv2d(x, w, b, off, logits)
    f = lambda: float((run()[0] * r).sum(dtype=np.float64))
    dx, dw, db, doff, dlog = deform_conv2d_backward(r, run()[1])
    return (f, {"x": x, "w": w, "b": b, "offsets": off, "mask_logits": logits},
            {"x": dx, "w": dw, "b": db, "offsets": doff, "mask_logits": dlog})


def case_deform_layer(rng, dtype):
    """Whole layer: gradients reach the offset branch through offsets and masks."""
    layer = DeformConv2d(2, 3, (2, 2), rng, dtype)
    layer.offset_weight.value[...] = 0.02 * rng.standard_normal(layer.offset_weight.value.shape)
    # centre offsets near half a pixel so sampling points stay off the integer grid
    layer.offset_bias.value[: 2 * layer.m_taps] = 0.5
    layer.offset_bias.value[2 * layer.m_taps:] = rng.standard_normal(layer.m_taps)
    x = (0.5 * rng.standard_normal((1, 2, 5, 4))).astype(dtype)
    r = _proj(rng, (1, 3, 5, 4), dtype)
    f = lambda: float((layer.forward(x) * r).sum(dtype=np.float64))
    params = layer.params()
    for p in params.values():
        p.zero_grad()
    layer.forward(x)
    dx = layer.backward(r)
    inputs = {"offset.weight": params["offset.weight"].value, "offset.bias": params["offset.bias"].value,
              "weight": params["weight"].value}
    grads = {k: params[k].grad.copy() for k in inputs}
    inputs["x"], grads["x"] = x, dx
    return f, inputs, grads


CASES = {
    "conv2d": case_conv2d,
    "maxpool2d": case_maxpool,
    "batchnorm2d": case_batchnorm,
    "batchnorm2d_eval": case_batchnorm_eval,
    "relu": case_relu,
    "dropout": case_dropout,
    "global_avg_pool": case_global_avg_pool,
    "linear": case_linear,
    "softmax_cross_entropy": case_softmax_ce,
    "bilinear_sample": case_bilinear,
    "deform_conv2d": case_deform_conv,
    "deform_layer": case_deform_layer,
}


def check_case(name, seed, bits=64, eps=None, tol=None, case=None) -> GradcheckReport:
    """Check one op for one seed.

    With ``bits=32`` the analytic gradients come from a float32 run, while the
    central differences are taken on a float64 build of the same case (same
    seed), so float32 rounding in the forward pass does not swamp the difference
    quotient.
    """
    d_eps, d_tol = DEFAULTS[bits]
    build = case or CASES[name]
    f, inputs, grads = build(np.random.default_rng(seed), np.float64)
    if bits == 32:
        _, _, grads = build(np.random.default_rng(seed), np.float32)
    return gradcheck(f, inputs, grads, eps or d_eps, tol or d_tol, op=name, seed=seed)


def run_suite(bits=64, seeds=range(20), ops=None) -> list[GradcheckReport]:
    return [check_case(name, s, bits) for name in (ops or CASES) for s in seeds]


def summarize(reports) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in reports:
        row = out.setdefault(r.op, {"seeds": 0, "max_rel_error": 0.0, "passed": True})
        row["seeds"] += 1
        row["max_rel_error"] = max(row["max_rel_error"], r.max_rel_error)
        row["passed"] = row["passed"] and r.passed
    return out
