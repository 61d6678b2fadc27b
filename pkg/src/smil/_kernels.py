"""Hot numeric kernels for convolution and pooling.

im2col/col2im gathers and 2x2 pooling are memory-bound; the JIT versions
avoid the strided-copy overhead of the numpy fallback. Both backends are
serial on purpose: BLAS keeps its own threads and the results stay
bit-reproducible. Set SMIL_NO_NUMBA=1 to force the numpy path.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _tune_malloc():
    # Per-pass conv buffers are ~10 MB; glibc hands allocations that size
    # back to the OS on free, so every iteration re-faults the pages. Keep
    # them on the heap instead (M_MMAP_THRESHOLD) and stop trimming the
    # heap top (M_TRIM_THRESHOLD). No-op on non-glibc platforms.
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"))
        libc.mallopt(-3, 128 * 1024 * 1024)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 512 * 1024 * 1024)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError, TypeError):  # pragma: no cover
        pass


_tune_malloc()

_USE_NUMBA = os.environ.get("SMIL_NO_NUMBA", "") not in ("1", "true", "yes")
if _USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        _USE_NUMBA = False

HAVE_NUMBA = _USE_NUMBA


def _im2col_np(x, kh, kw):
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # (n,c,oh,ow,kh,kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_add_np(dcols, kh, kw, dx):
    n, c, h, w = dx.shape
    oh, ow = h - kh + 1, w - kw + 1
    d6 = dcols.reshape(n, oh, ow, c, kh, kw)
    for u in range(kh):
        for v in range(kw):
            dx[:, :, u : u + oh, v : v + ow] += d6[:, :, :, :, u, v].transpose(0, 3, 1, 2)


def _pool2_fwd_np(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def _pool2_bwd_np(g, idx, dx):
    n, c, oh, ow = g.shape
    db = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
    np.put_along_axis(db, idx[..., None].astype(np.intp), g[..., None], axis=-1)
    dx += db.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * oh, 2 * ow)


if _USE_NUMBA:

    @njit(fastmath=False, cache=True)
    def _im2col_nb(x, kh, kw, cols):
        n, c, h, w = x.shape
        oh, ow = h - kh + 1, w - kw + 1
        for ni in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (ni * oh + i) * ow + j
                    k = 0
                    for ci in range(c):
                        for u in range(kh):
                            xr = x[ni, ci, i + u]
                            for v in range(kw):
                                cols[row, k] = xr[j + v]
                                k += 1

    @njit(fastmath=False, cache=True)
    def _col2im_add_nb(dcols, kh, kw, dx):
        n, c, h, w = dx.shape
        oh, ow = h - kh + 1, w - kw + 1
        for ni in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (ni * oh + i) * ow + j
                    k = 0
                    for ci in range(c):
                        for u in range(kh):
                            xr = dx[ni, ci, i + u]
                            for v in range(kw):
                                xr[j + v] += dcols[row, k]
                                k += 1

    @njit(fastmath=False, cache=True)
    def _rows_to_nfhw_nb(y2, out):
        n, f, oh, ow = out.shape
        for ni in range(n):
            for i in range(oh):
                for j in range(ow):
                    row = (ni * oh + i) * ow + j
                    for fi in range(f):
                        out[ni, fi, i, j] = y2[row, fi]

    @njit(fastmath=False, cache=True)
    def _nfhw_to_rows_nb(g, out):
        n, f, oh, ow = g.shape
        for ni in range(n):
            for fi in range(f):
                for i in range(oh):
                    gr = g[ni, fi, i]
                    for j in range(ow):
                        out[(ni * oh + i) * ow + j, fi] = gr[j]

    @njit(fastmath=False, cache=True)
    def _pool2_fwd_nb(x, y, idx):
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        for ni in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        # scan order (0,0),(0,1),(1,0),(1,1): strict > keeps
                        # the lowest flat index on ties
                        best = x[ni, ci, 2 * i, 2 * j]
                        bk = 0
                        v = x[ni, ci, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            bk = 1
                        v = x[ni, ci, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            bk = 2
                        v = x[ni, ci, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            bk = 3
                        y[ni, ci, i, j] = best
                        idx[ni, ci, i, j] = bk

    @njit(fastmath=False, cache=True)
    def _pool2_bwd_nb(g, idx, dx):
        n, c, oh, ow = g.shape
        for ni in range(n):
            for ci in range(c):
                for i in range(oh):
                    for j in range(ow):
                        bk = idx[ni, ci, i, j]
                        dx[ni, ci, 2 * i + bk // 2, 2 * j + bk % 2] += g[ni, ci, i, j]


def im2col(x, kh, kw):
    """(N,C,H,W) -> (N*oh*ow, C*kh*kw), (c,u,v) fastest-varying."""
    if _USE_NUMBA:
        n, c, h, w = x.shape
        oh, ow = h - kh + 1, w - kw + 1
        cols = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
        _im2col_nb(np.ascontiguousarray(x), kh, kw, cols)
        return cols
    return _im2col_np(x, kh, kw)


def col2im_add(dcols, kh, kw, dx):
    """Scatter-add column gradients back onto the (N,C,H,W) input buffer."""
    if _USE_NUMBA:
        _col2im_add_nb(np.ascontiguousarray(dcols), kh, kw, dx)
    else:
        _col2im_add_np(dcols, kh, kw, dx)


def rows_to_nfhw(y2, n, f, oh, ow):
    if _USE_NUMBA:
        out = np.empty((n, f, oh, ow), dtype=y2.dtype)
        _rows_to_nfhw_nb(np.ascontiguousarray(y2), out)
        return out
    return np.ascontiguousarray(y2.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))


def nfhw_to_rows(g):
    n, f, oh, ow = g.shape
    if _USE_NUMBA:
        out = np.empty((n * oh * ow, f), dtype=g.dtype)
        _nfhw_to_rows_nb(np.ascontiguousarray(g), out)
        return out
    return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)


def pool2_fwd(x):
    """2x2/stride-2 max pool; returns values and per-window argmax (int8)."""
    if _USE_NUMBA:
        n, c, h, w = x.shape
        y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
        idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
        _pool2_fwd_nb(np.ascontiguousarray(x), y, idx)
        return y, idx
    return _pool2_fwd_np(x)


def pool2_bwd(g, idx, dx):
    if _USE_NUMBA:
        _pool2_bwd_nb(np.ascontiguousarray(g), idx, dx)
    else:
        _pool2_bwd_np(g, idx, dx)
