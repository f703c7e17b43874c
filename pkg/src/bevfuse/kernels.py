"""Bilinear gather/scatter kernels.

These inner loops dominate runtime (deformable attention samples
H*W*heads*points locations per layer, forward and backward). Each kernel
exists twice: a numba ``@njit`` version and a vectorized pure-numpy
fallback. The public names (``sample_forward``, ``sample_backward_grid``,
``sample_backward_points``) dispatch to the numba versions unless
``BEVFUSE_NUMBA=0`` is set in the environment or numba is missing.

Both paths evaluate the four corner contributions in the same order
(y0x0, y0x1, y1x0, y1x1) with identical weight expressions, so results
agree to the last bit in practice. ``benchmarks/bench_kernels.py``
compares their throughput.

Coordinates are (row, col) floats in cell units. Corners outside the
grid contribute zero (zero padding), so arbitrarily far out-of-bounds
points are legal and yield zeros with zero gradient.
"""

import os

import numpy as np


def _sample_forward_np(grid, ys, xs):
    """grid [H,W,C], ys/xs [N] -> sampled values [N,C]."""
    h, w, c = grid.shape
    n = ys.shape[0]
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    iy0 = y0.astype(np.int64)
    ix0 = x0.astype(np.int64)
    out = np.zeros((n, c))
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        iy = iy0 + dy
        ix = ix0 + dx
        wgt = (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx)
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        vals = grid[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        out += np.where(ok, wgt, 0.0)[:, None] * vals
    return out


def _sample_backward_grid_np(gout, ys, xs, h, w):
    """Scatter-add of gout [N,C] into a zero grid gradient [H,W,C]."""
    n, c = gout.shape
    ggrid = np.zeros((h, w, c))
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    iy0 = y0.astype(np.int64)
    ix0 = x0.astype(np.int64)
    iys = np.empty((n, 4), dtype=np.int64)
    ixs = np.empty((n, 4), dtype=np.int64)
    wgts = np.empty((n, 4))
    for k, (dy, dx) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        iy = iy0 + dy
        ix = ix0 + dx
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        iys[:, k] = np.clip(iy, 0, h - 1)
        ixs[:, k] = np.clip(ix, 0, w - 1)
        wgts[:, k] = np.where(ok, (wy if dy else 1.0 - wy) * (wx if dx else 1.0 - wx), 0.0)
    # flatten point-major so colliding cells accumulate in the same order
    # as the loop kernel (add.at applies updates in index order)
    contrib = wgts[:, :, None] * gout[:, None, :]
    np.add.at(ggrid, (iys.reshape(-1), ixs.reshape(-1)), contrib.reshape(-1, c))
    return ggrid


def _sample_backward_points_np(grid, gout, ys, xs):
    """Gradient of sum(gout * sampled) w.r.t. the point coordinates."""
    h, w, _ = grid.shape
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    iy0 = y0.astype(np.int64)
    ix0 = x0.astype(np.int64)
    gys = np.zeros_like(ys)
    gxs = np.zeros_like(xs)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        iy = iy0 + dy
        ix = ix0 + dx
        ok = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        vals = grid[np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        dot = np.where(ok, (gout * vals).sum(axis=1), 0.0)
        # d(weight)/dy is +-(x-weight factor); likewise for x
        gys += ((1.0 if dy else -1.0) * (wx if dx else 1.0 - wx)) * dot
        gxs += ((1.0 if dx else -1.0) * (wy if dy else 1.0 - wy)) * dot
    return gys, gxs


def _sample_forward_loops(grid, ys, xs):
    h, w, c = grid.shape
    n = ys.shape[0]
    out = np.zeros((n, c))
    for i in range(n):
        y = ys[i]
        x = xs[i]
        iy0 = int(np.floor(y))
        ix0 = int(np.floor(x))
        wy = y - iy0
        wx = x - ix0
        for dy in range(2):
            iy = iy0 + dy
            if iy < 0 or iy >= h:
                continue
            fy = wy if dy else 1.0 - wy
            for dx in range(2):
                ix = ix0 + dx
                if ix < 0 or ix >= w:
                    continue
                wgt = fy * (wx if dx else 1.0 - wx)
                for k in range(c):
                    out[i, k] += wgt * grid[iy, ix, k]
    return out


def _sample_backward_grid_loops(gout, ys, xs, h, w):
    n, c = gout.shape
    ggrid = np.zeros((h, w, c))
    for i in range(n):
        y = ys[i]
        x = xs[i]
        iy0 = int(np.floor(y))
        ix0 = int(np.floor(x))
        wy = y - iy0
        wx = x - ix0
        for dy in range(2):
            iy = iy0 + dy
            if iy < 0 or iy >= h:
                continue
            fy = wy if dy else 1.0 - wy
            for dx in range(2):
                ix = ix0 + dx
                if ix < 0 or ix >= w:
                    continue
                wgt = fy * (wx if dx else 1.0 - wx)
                for k in range(c):
                    ggrid[iy, ix, k] += wgt * gout[i, k]
    return ggrid


def _sample_backward_points_loops(grid, gout, ys, xs):
    h, w, c = grid.shape
    n = ys.shape[0]
    gys = np.zeros(n)
    gxs = np.zeros(n)
    for i in range(n):
        y = ys[i]
        x = xs[i]
        iy0 = int(np.floor(y))
        ix0 = int(np.floor(x))
        wy = y - iy0
        wx = x - ix0
        gy = 0.0
        gx = 0.0
        for dy in range(2):
            iy = iy0 + dy
            if iy < 0 or iy >= h:
                continue
            fy = wy if dy else 1.0 - wy
            sy = 1.0 if dy else -1.0
            for dx in range(2):
                ix = ix0 + dx
                if ix < 0 or ix >= w:
                    continue
                fx = wx if dx else 1.0 - wx
                sx = 1.0 if dx else -1.0
                dot = 0.0
                for k in range(c):
                    dot += gout[i, k] * grid[iy, ix, k]
                gy += sy * fx * dot
                gx += sx * fy * dot
        gys[i] = gy
        gxs[i] = gx
    return gys, gxs


USE_NUMBA = os.environ.get("BEVFUSE_NUMBA", "1") != "0"
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

if USE_NUMBA:
    sample_forward_jit = njit(cache=True)(_sample_forward_loops)
    sample_backward_grid_jit = njit(cache=True)(_sample_backward_grid_loops)
    sample_backward_points_jit = njit(cache=True)(_sample_backward_points_loops)
    sample_forward = sample_forward_jit
    sample_backward_grid = sample_backward_grid_jit
    sample_backward_points = sample_backward_points_jit
else:
    sample_forward = _sample_forward_np
    sample_backward_grid = _sample_backward_grid_np
    sample_backward_points = _sample_backward_points_np

sample_forward_numpy = _sample_forward_np
sample_backward_grid_numpy = _sample_backward_grid_np
sample_backward_points_numpy = _sample_backward_points_np
