"""Attraction velocity induced by a density through the plane's log potential.

The velocity is the whole-plane convolution

    grad_v(x) = -(1/2pi) * integral (x - y) / |x - y|^2 u(y) dy,

discretized as a midpoint sum over cell centers.  The self-cell contribution
vanishes because the kernel is odd (principal value over a centered cell),
which makes the midpoint rule second-order without any tuning parameter.
The sum is evaluated either directly or, equivalently to rounding error, by
zero-padded FFT convolution on the doubled domain so no periodic images
contaminate the result.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

from ._threads import thread_count
from .core import DensityField, FloatArray, Grid2D, VectorField
from .errors import DataError

_kernel_cache: dict[tuple[float, int], tuple[FloatArray, FloatArray]] = {}


def _kernel_ffts(grid: Grid2D) -> tuple[FloatArray, FloatArray]:
    """rfft2 of both kernel components sampled on the doubled domain."""
    key = (grid.L, grid.n)
    cached = _kernel_cache.get(key)
    if cached is not None:
        return cached
    n = grid.n
    m = 2 * n
    # displacement in cells along one axis, wraparound order: 0..n-1, -n..-1
    off = np.arange(m)
    off = np.where(off < n, off, off - m).astype(np.float64) * grid.h
    dx = off[:, None]
    dy = off[None, :]
    r2 = dx * dx + dy * dy
    with np.errstate(divide="ignore", invalid="ignore"):
        kx = np.where(r2 > 0, dx / r2, 0.0)
        ky = np.where(r2 > 0, dy / r2, 0.0)
    with scipy.fft.set_workers(thread_count()):
        out = (scipy.fft.rfft2(kx), scipy.fft.rfft2(ky))
    if len(_kernel_cache) > 8:
        _kernel_cache.clear()
    _kernel_cache[key] = out
    return out


def newtonian_gradient(u: DensityField) -> VectorField:
    """Attraction velocity on the whole grid via zero-padded FFT convolution."""
    grid = u.grid
    n = grid.n
    if not np.all(np.isfinite(u.values)):  # cheap re-check; fields validate on build
        raise DataError("density contains non-finite values")
    kxf, kyf = _kernel_ffts(grid)
    pad = np.zeros((2 * n, 2 * n))
    pad[:n, :n] = u.values
    with scipy.fft.set_workers(thread_count()):
        uf = scipy.fft.rfft2(pad)
        vx = scipy.fft.irfft2(kxf * uf, s=(2 * n, 2 * n))[:n, :n]
        vy = scipy.fft.irfft2(kyf * uf, s=(2 * n, 2 * n))[:n, :n]
    scale = -grid.cell_area / (2.0 * np.pi)
    return VectorField(grid, scale * vx, scale * vy)


def newtonian_gradient_direct(u: DensityField) -> VectorField:
    """Direct-summation reference path; identical quadrature, O(n^4) cost."""
    grid = u.grid
    n = grid.n
    c = grid.centers()
    X, Y = grid.mesh()
    src = np.stack([X.ravel(), Y.ravel()], axis=1)
    w = u.values.ravel() * grid.cell_area
    vx = np.empty((n, n))
    vy = np.empty((n, n))
    for i in range(n):
        dx = c[i] - src[:, 0]            # (n^2,) same for the whole row
        dy = c[:, None] - src[None, :, 1]  # (n, n^2) one row per target y
        r2 = dx[None, :] ** 2 + dy**2
        with np.errstate(divide="ignore", invalid="ignore"):
            invr2 = np.where(r2 > 0, 1.0 / r2, 0.0)
        vx[i, :] = (dx[None, :] * invr2) @ w
        vy[i, :] = (dy * invr2) @ w
    scale = -1.0 / (2.0 * np.pi)
    return VectorField(grid, scale * vx, scale * vy)


def newtonian_gradient_at(u: DensityField, x) -> FloatArray:
    """Attraction velocity at one arbitrary interior point.

    Direct quadrature over all cells; the cell containing ``x`` is skipped,
    the discrete analogue of taking the kernel's principal value.
    """
    grid = u.grid
    p = np.asarray(x, dtype=np.float64).reshape(2)
    if not grid.contains(p):
        raise ValueError(f"evaluation point {tuple(p)} lies outside the open domain")
    X, Y = grid.mesh()
    dx = p[0] - X
    dy = p[1] - Y
    r2 = dx * dx + dy * dy
    # mask the singular cell (the one whose center is nearest to x)
    i0 = int(np.clip(np.floor((p[0] + grid.L) / grid.h), 0, grid.n - 1))
    j0 = int(np.clip(np.floor((p[1] + grid.L) / grid.h), 0, grid.n - 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        invr2 = np.where(r2 > 0, 1.0 / r2, 0.0)
    invr2[i0, j0] = 0.0
    w = u.values * (grid.cell_area / (-2.0 * np.pi))
    return np.array([float((dx * invr2 * w).sum()), float((dy * invr2 * w).sum())])
