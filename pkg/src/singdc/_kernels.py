"""Compiled inner loops for deformable sampling.

Sampling point for tap m = (i, j) of output pixel (r, c) is
(r + i - top + dy, c + j - left + dx). Corners outside the map read as zero.
"""
import math

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def deform_gather(x, off, kh, kw, top, left, out):
    """x: (C,H,W), off: (M,2,H*W) -> out: (C,M,H*W) bilinear samples."""
    c_n, h, w = x.shape
    for m in range(kh * kw):
        ti = m // kw - top
        tj = m % kw - left
        for p in range(h * w):
            py = p // w + ti + off[m, 0, p]
            px = p % w + tj + off[m, 1, p]
            y0f = math.floor(py)
            x0f = math.floor(px)
            ly = py - y0f
            lx = px - x0f
            y0 = int(y0f)
            x0 = int(x0f)
            w00 = (1 - ly) * (1 - lx)
            w01 = (1 - ly) * lx
            w10 = ly * (1 - lx)
            w11 = ly * lx
            in_y0 = 0 <= y0 < h
            in_y1 = 0 <= y0 + 1 < h
            in_x0 = 0 <= x0 < w
            in_x1 = 0 <= x0 + 1 < w
            for c in range(c_n):
                v = 0.0
                if in_y0 and in_x0:
                    v += w00 * x[c, y0, x0]
                if in_y0 and in_x1:
                    v += w01 * x[c, y0, x0 + 1]
                if in_y1 and in_x0:
                    v += w10 * x[c, y0 + 1, x0]
                if in_y1 and in_x1:
                    v += w11 * x[c, y0 + 1, x0 + 1]
                out[c, m, p] = v


@numba.njit(cache=True, nogil=True)
def deform_scatter(x, off, ds, kh, kw, top, left, dx, doff):
    """Backward of :func:`deform_gather`.

    ds: (C,M,H*W) gradient w.r.t. the samples. Accumulates into dx (C,H,W) and
    writes doff (M,2,H*W).
    """
    c_n, h, w = x.shape
    for m in range(kh * kw):
        ti = m // kw - top
        tj = m % kw - left
        for p in range(h * w):
            py = p // w + ti + off[m, 0, p]
            px = p % w + tj + off[m, 1, p]
            y0f = math.floor(py)
            x0f = math.floor(px)
            ly = py - y0f
            lx = px - x0f
            y0 = int(y0f)
            x0 = int(x0f)
            in_y0 = 0 <= y0 < h
            in_y1 = 0 <= y0 + 1 < h
            in_x0 = 0 <= x0 < w
            in_x1 = 0 <= x0 + 1 < w
            gy = 0.0
            gx = 0.0
            for c in range(c_n):
                g = ds[c, m, p]
                if g == 0.0:
                    continue
                v00 = x[c, y0, x0] if in_y0 and in_x0 else 0.0
                v01 = x[c, y0, x0 + 1] if in_y0 and in_x1 else 0.0
                v10 = x[c, y0 + 1, x0] if in_y1 and in_x0 else 0.0
                v11 = x[c, y0 + 1, x0 + 1] if in_y1 and in_x1 else 0.0
                gy += g * ((1 - lx) * (v10 - v00) + lx * (v11 - v01))
                gx += g * ((1 - ly) * (v01 - v00) + ly * (v11 - v10))
                if in_y0 and in_x0:
                    dx[c, y0, x0] += g * (1 - ly) * (1 - lx)
                if in_y0 and in_x1:
                    dx[c, y0, x0 + 1] += g * (1 - ly) * lx
                if in_y1 and in_x0:
                    dx[c, y0 + 1, x0] += g * ly * (1 - lx)
                if in_y1 and in_x1:
                    dx[c, y0 + 1, x0 + 1] += g * ly * lx
            doff[m, 0, p] = gy
            doff[m, 1, p] = gx


def warmup():
    """Compile both kernels for float32 and float64 ahead of first use."""
    for dt in (np.float32, np.float64):
        x = np.zeros((1, 2, 2), dt)
        off = np.zeros((1, 2, 4), dt)
        out = np.zeros((1, 1, 4), dt)
        deform_gather(x, off, 1, 1, 0, 0, out)
        deform_scatter(x, off, out, 1, 1, 0, 0, np.zeros_like(x), np.zeros_like(off))
