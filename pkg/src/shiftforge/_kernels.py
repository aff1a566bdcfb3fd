"""Compiled gather/scatter kernels for convolution (im2col / col2im)."""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True)
def im2col(x, kh, kw, stride, padding, ho, wo):
    """Rows are receptive fields ordered (n, oh, ow); columns (c, i, j). Out-of-bounds taps read 0."""
    n, c, h, w = x.shape
    cols = np.zeros((n * ho * wo, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (b * ho + oh) * wo + ow
                for ch in range(c):
                    for i in range(kh):
                        y = oh * stride + i - padding
                        if y < 0 or y >= h:
                            continue
                        base = (ch * kh + i) * kw
                        for j in range(kw):
                            xx = ow * stride + j - padding
                            if 0 <= xx < w:
                                cols[row, base + j] = x[b, ch, y, xx]
    return cols


@numba.njit(cache=True)
def col2im(cols, n, c, h, w, kh, kw, stride, padding, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (b * ho + oh) * wo + ow
                for ch in range(c):
                    for i in range(kh):
                        y = oh * stride + i - padding
                        if y < 0 or y >= h:
                            continue
                        base = (ch * kh + i) * kw
                        for j in range(kw):
                            xx = ow * stride + j - padding
                            if 0 <= xx < w:
                                out[b, ch, y, xx] += cols[row, base + j]
    return out


@numba.njit(cache=True)
def rows_to_nchw(y, n, ho, wo):
    """[(n, oh, ow), f] -> [n, f, oh, ow]."""
    f = y.shape[1]
    out = np.empty((n, f, ho, wo), dtype=y.dtype)
    for b in range(n):
        for oh in range(ho):
            for ow in range(wo):
                row = (b * ho + oh) * wo + ow
                for k in range(f):
                    out[b, k, oh, ow] = y[row, k]
    return out


@numba.njit(cache=True)
def nchw_to_rows(g):
    n, f, ho, wo = g.shape
    out = np.empty((n * ho * wo, f), dtype=g.dtype)
    for b in range(n):
        for k in range(f):
            for oh in range(ho):
                for ow in range(wo):
                    out[(b * ho + oh) * wo + ow, k] = g[b, k, oh, ow]
    return out


@numba.njit(cache=True)
def maxpool2x2(x):
    """2x2/stride-2 max pool; also returns which corner (0..3, first maximum wins) was taken."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.uint8)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = x[b, ch, 2 * i, 2 * j]
                    k = 0
                    v = x[b, ch, 2 * i, 2 * j + 1]
                    if v > best:
                        best, k = v, 1
                    v = x[b, ch, 2 * i + 1, 2 * j]
                    if v > best:
                        best, k = v, 2
                    v = x[b, ch, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best, k = v, 3
                    out[b, ch, i, j] = best
                    arg[b, ch, i, j] = k
    return out, arg


@numba.njit(cache=True)
def maxpool2x2_backward(g, arg, h, w):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, h, w), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    k = arg[b, ch, i, j]
                    gx[b, ch, 2 * i + k // 2, 2 * j + k % 2] = g[b, ch, i, j]
    return gx


@numba.njit(cache=True)
def shift_accumulate(x, rowptr, cols, shifts, negs, n):
    """acc[i, j] = sum over nonzero w[kk, j] of +-(x[i, kk] << p). Shifts, negations and adds only."""
    m, k = x.shape
    acc = np.zeros((m, n), dtype=np.int64)
    for i in range(m):
        for kk in range(k):
            xv = np.int64(x[i, kk])
            for idx in range(rowptr[kk], rowptr[kk + 1]):
                v = xv << shifts[idx]
                if negs[idx]:
                    acc[i, cols[idx]] -= v
                else:
                    acc[i, cols[idx]] += v
    return acc
