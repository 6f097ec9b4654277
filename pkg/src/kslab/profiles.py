"""Named analytic initial-data families used by scenarios and tests."""

from __future__ import annotations

import math

import numpy as np

from .core import DensityField, FloatArray, Grid2D


def bubble_values(points: FloatArray, lam: float = 1.0, center=(0.0, 0.0)) -> FloatArray:
    """Stationary concentration profile ``8 lam^2 / (lam^2 + |x - c|^2)^2``.

    Carries total mass ``8 pi`` for every ``lam``; it is an exact steady
    state of the field equations and the shape each forming atom approaches.
    """
    pts = np.asarray(points, dtype=np.float64)
    r2 = (pts[..., 0] - center[0]) ** 2 + (pts[..., 1] - center[1]) ** 2
    return 8.0 * lam**2 / (lam**2 + r2) ** 2


def bubble_profile(grid: Grid2D, lam: float = 1.0, center=(0.0, 0.0)) -> DensityField:
    X, Y = grid.mesh()
    pts = np.stack([X, Y], axis=-1)
    return DensityField(grid, bubble_values(pts, lam, center))


def bubble_velocity(points: FloatArray, lam: float = 1.0, center=(0.0, 0.0)) -> FloatArray:
    """Exact attraction velocity of the bubble: ``-4 (x - c) / (lam^2 + |x - c|^2)``."""
    pts = np.asarray(points, dtype=np.float64)
    rel = pts - np.asarray(center, dtype=np.float64)
    r2 = (rel**2).sum(axis=-1)
    return -4.0 * rel / (lam**2 + r2)[..., None]


def gaussian_profile(grid: Grid2D, mass: float, width: float = 1.0,
                     center=(0.0, 0.0)) -> DensityField:
    """Gaussian of given total mass and standard deviation ``width``."""
    X, Y = grid.mesh()
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    values = mass / (2.0 * math.pi * width**2) * np.exp(-r2 / (2.0 * width**2))
    return DensityField(grid, values)


def ring_profile(grid: Grid2D, mass: float, radius: float, width: float,
                 center=(0.0, 0.0)) -> DensityField:
    """Thin Gaussian annulus of given total mass at the given radius."""
    X, Y = grid.mesh()
    r = np.hypot(X - center[0], Y - center[1])
    shape = np.exp(-((r - radius) ** 2) / (2.0 * width**2))
    scale = mass / (grid.cell_area * shape.sum())
    return DensityField(grid, scale * shape)


def sum_profiles(*fields: DensityField) -> DensityField:
    """Pointwise sum of densities on a common grid."""
    if not fields:
        raise ValueError("need at least one field")
    grid = fields[0].grid
    acc = np.zeros((grid.n, grid.n))
    for f in fields:
        if f.grid != grid:
            raise ValueError("cannot sum fields on different grids")
        acc += f.values
    return DensityField(grid, acc)
