"""Grids, fields, point configurations and their file formats.

Everything downstream (field solver, point dynamics, rescaling) works on the
immutable value types defined here.  The domain is always the square
``[-L, L]^2`` discretized by an even number ``n`` of cell-centered cells per
axis; the far field is treated as vacuum, so results are only meaningful
while the density is numerically negligible near the box boundary.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from numpy.typing import NDArray

from .errors import DataError

FloatArray = NDArray[np.float64]

#: Mass carried by a single concentration atom in the singular limit.
ATOM_MASS = 8.0 * math.pi

#: Frame tags for point configurations.
FRAME_PHYSICAL = "physical-q"
FRAME_RENORMALIZED = "renormalized-p"
_FRAMES = (FRAME_PHYSICAL, FRAME_RENORMALIZED)

_SNAPSHOT_MAGIC = b"KSF1"


def _readonly(a: FloatArray) -> FloatArray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# Grid and fields
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centered grid on the square ``[-L, L]^2``.

    Cell centers sit at ``-L + (i + 1/2) h`` with ``h = 2 L / n``; ``n`` must
    be even and at least 8 so the box can be halved/doubled cleanly by the
    rescaling operations.
    """

    L: float
    n: int

    def __post_init__(self) -> None:
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"half-width must be positive and finite, got {self.L}")
        if self.n < 8 or self.n % 2 != 0:
            raise ValueError(f"n must be even and >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def cell_area(self) -> float:
        return self.h * self.h

    def centers(self) -> FloatArray:
        """1D coordinates of cell centers along either axis."""
        return -self.L + (np.arange(self.n) + 0.5) * self.h

    def mesh(self) -> tuple[FloatArray, FloatArray]:
        """Cell-center coordinate arrays ``X, Y`` with ``X[i, j] = x_i``."""
        c = self.centers()
        return np.meshgrid(c, c, indexing="ij")

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        return abs(x) < self.L and abs(y) < self.L


@dataclass(frozen=True)
class DensityField:
    """Nonnegative scalar density sampled at cell centers.

    ``values[i, j]`` is the density at ``(x_i, y_j)``; row-major order over
    ``(i, j)`` is also the on-disk layout of snapshots.
    """

    grid: Grid2D
    values: FloatArray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(v)):
            raise DataError("density contains non-finite values")
        if v.size and float(v.min()) < 0.0:
            raise DataError(f"density contains negative values (min {v.min():.3e})")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def h(self) -> float:
        return self.grid.h

    def with_values(self, values: FloatArray) -> "DensityField":
        return DensityField(self.grid, values)


@dataclass(frozen=True)
class VectorField:
    """2D vector samples at cell centers (velocities, potential gradients)."""

    grid: Grid2D
    vx: FloatArray
    vy: FloatArray

    def __post_init__(self) -> None:
        shape = (self.grid.n, self.grid.n)
        for name in ("vx", "vy"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != shape:
                raise ValueError(f"{name} shape {a.shape} does not match grid n={self.grid.n}")
            object.__setattr__(self, name, _readonly(a))

    def __add__(self, other: "VectorField") -> "VectorField":
        if other.grid != self.grid:
            raise ValueError("cannot add vector fields on different grids")
        return VectorField(self.grid, self.vx + other.vx, self.vy + other.vy)

    def max_norm(self) -> float:
        return float(np.sqrt(self.vx**2 + self.vy**2).max()) if self.vx.size else 0.0


# ---------------------------------------------------------------------------
# Forcing
# ---------------------------------------------------------------------------

GradFn = Callable[[FloatArray, float], FloatArray]
ScalarFn = Callable[[FloatArray, float], FloatArray]


@dataclass(frozen=True)
class ForcingSpec:
    """Optional drift gradient and source term of the generalized system.

    ``grad_f`` maps ``(points, t) -> (..., 2)`` drift gradients, ``g`` maps
    ``(points, t) -> (...)`` source values; either may instead be a constant
    in-time :class:`VectorField` / :class:`DensityField`.  Both default to
    zero, which recovers the plain chemotaxis system.
    """

    grad_f: Union[GradFn, VectorField, None] = None
    g: Union[ScalarFn, DensityField, None] = None

    @property
    def is_zero(self) -> bool:
        return self.grad_f is None and self.g is None

    def grad_f_at(self, points: FloatArray, t: float) -> FloatArray:
        """Drift gradient at arbitrary points, shape ``(..., 2)``."""
        pts = np.asarray(points, dtype=np.float64)
        if self.grad_f is None:
            return np.zeros(pts.shape)
        if isinstance(self.grad_f, VectorField):
            fx = _bilinear(self.grad_f.grid, self.grad_f.vx, pts)
            fy = _bilinear(self.grad_f.grid, self.grad_f.vy, pts)
            return np.stack([fx, fy], axis=-1)
        out = np.asarray(self.grad_f(pts, t), dtype=np.float64)
        if out.shape != pts.shape:
            raise ValueError(f"grad_f returned shape {out.shape}, expected {pts.shape}")
        return out

    def grad_f_on(self, grid: Grid2D, t: float) -> tuple[FloatArray, FloatArray]:
        """Drift gradient sampled on all cell centers of ``grid``."""
        if self.grad_f is None:
            z = np.zeros((grid.n, grid.n))
            return z, z.copy()
        if isinstance(self.grad_f, VectorField):
            if self.grad_f.grid == grid:
                return np.asarray(self.grad_f.vx), np.asarray(self.grad_f.vy)
        X, Y = grid.mesh()
        pts = np.stack([X, Y], axis=-1)
        gf = self.grad_f_at(pts, t)
        return gf[..., 0], gf[..., 1]

    def g_on(self, grid: Grid2D, t: float) -> FloatArray | None:
        """Source term on cell centers, or ``None`` when absent."""
        if self.g is None:
            return None
        if isinstance(self.g, DensityField):
            if self.g.grid != grid:
                raise ValueError("constant source field lives on a different grid")
            return np.asarray(self.g.values)
        X, Y = grid.mesh()
        pts = np.stack([X, Y], axis=-1)
        out = np.asarray(self.g(pts, t), dtype=np.float64)
        if out.shape != (grid.n, grid.n):
            raise ValueError(f"g returned shape {out.shape}, expected {(grid.n, grid.n)}")
        return out


# ---------------------------------------------------------------------------
# Point configurations and hybrid states
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PointConfiguration:
    """Ordered labeled points in the plane, tagged with their frame.

    ``physical-q`` configurations live in original coordinates, where the
    mutual attraction makes clusters collapse in finite time;
    ``renormalized-p`` configurations live in self-similar coordinates,
    where an extra outward drift ``p/2`` balances the attraction.
    """

    points: FloatArray
    frame: str = FRAME_PHYSICAL

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (N>=1, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DataError("point configuration contains non-finite coordinates")
        if self.frame not in _FRAMES:
            raise ValueError(f"frame must be one of {_FRAMES}, got {self.frame!r}")
        if pts.shape[0] > 1 and min_separation(pts) <= 0.0:
            raise ValueError("points must be pairwise distinct")
        object.__setattr__(self, "points", _readonly(pts))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def min_separation(self) -> float:
        return min_separation(self.points)

    def with_points(self, points: FloatArray) -> "PointConfiguration":
        return PointConfiguration(points, self.frame)


def min_separation(points: FloatArray) -> float:
    """Smallest pairwise distance; ``inf`` for a single point."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 2:
        return math.inf
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(d, np.inf)
    return float(d.min())


@dataclass(frozen=True)
class HybridState:
    """Concentration atoms of mass ``ATOM_MASS`` riding on a diffuse density."""

    atoms: PointConfiguration | None
    rho: DensityField
    t: float = 0.0

    def __post_init__(self) -> None:
        if self.atoms is not None:
            for q in self.atoms.points:
                if not self.rho.grid.contains(q):
                    raise ValueError(f"atom at {tuple(q)} lies outside the open domain")

    @property
    def n_atoms(self) -> int:
        return 0 if self.atoms is None else self.atoms.n_points

    def measure_mass(self) -> float:
        """Total mass of the measure: atoms plus diffuse part."""
        return ATOM_MASS * self.n_atoms + total_mass(self.rho)


@dataclass(frozen=True)
class SelfSimilarState:
    """Density in similarity variables together with the rescaled time."""

    z: DensityField
    s: float

    @property
    def grid(self) -> Grid2D:
        return self.z.grid


@dataclass(frozen=True)
class ConcentrationThresholds:
    """Tunable constants of the concentration detector.

    The theory only guarantees existence of suitable small constants, so the
    defaults are calibrated choices: a quarter of the atom mass for
    ``eps_star``, a detection disk of a few cells.  All are overridable per
    run.
    """

    eps_star: float = 2.0 * math.pi
    theta_star: float = 0.25
    detect_radius: float = 0.1

    def __post_init__(self) -> None:
        if not self.eps_star > 0:
            raise ValueError("eps_star must be positive")
        if not 0.0 < self.theta_star < 1.0:
            raise ValueError("theta_star must lie in (0, 1)")
        if not self.detect_radius > 0:
            raise ValueError("detect_radius must be positive")

    @classmethod
    def for_grid(cls, grid: Grid2D, *, cells: int = 8, eps_star: float = 2.0 * math.pi,
                 theta_star: float = 0.25) -> "ConcentrationThresholds":
        return cls(eps_star=eps_star, theta_star=theta_star, detect_radius=cells * grid.h)


# ---------------------------------------------------------------------------
# Cutoff functions
# ---------------------------------------------------------------------------

def _smoothstep(x: FloatArray) -> FloatArray:
    return x * x * x * (10.0 + x * (-15.0 + 6.0 * x))


def _smoothstep_d1(x: FloatArray) -> FloatArray:
    return 30.0 * x * x * (1.0 - x) ** 2


def _smoothstep_d2(x: FloatArray) -> FloatArray:
    return 60.0 * x * (2.0 * x - 1.0) * (x - 1.0)


@dataclass(frozen=True)
class CutoffFunction:
    """Radially symmetric C^2 bump: 1 inside ``r1``, 0 outside ``r2``.

    The bridge is the quintic smoothstep in the radial variable, so value,
    gradient and Laplacian all have closed forms.  Derivative bounds of this
    profile: ``|grad| <= 1.875 / (r2 - r1)`` and
    ``|d2/dr2| <= 60/(3*sqrt(3)) / (r2 - r1)^2``.
    """

    center: FloatArray
    r1: float
    r2: float

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=np.float64).reshape(2)
        if not (0.0 < self.r1 < self.r2):
            raise ValueError(f"need 0 < r1 < r2, got r1={self.r1}, r2={self.r2}")
        object.__setattr__(self, "center", _readonly(c))

    def _radial(self, points: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray]:
        pts = np.asarray(points, dtype=np.float64)
        rel = pts - self.center
        r = np.sqrt((rel**2).sum(axis=-1))
        return rel, r, np.clip((r - self.r1) / (self.r2 - self.r1), 0.0, 1.0)

    def value(self, points: FloatArray) -> FloatArray:
        _, r, xi = self._radial(points)
        out = 1.0 - _smoothstep(xi)
        return out if out.ndim else float(out)

    def gradient(self, points: FloatArray) -> FloatArray:
        rel, r, xi = self._radial(points)
        width = self.r2 - self.r1
        inside = (r > self.r1) & (r < self.r2)
        scale = np.where(inside, -_smoothstep_d1(xi) / (width * np.where(r > 0, r, 1.0)), 0.0)
        return scale[..., None] * rel

    def laplacian(self, points: FloatArray) -> FloatArray:
        _, r, xi = self._radial(points)
        width = self.r2 - self.r1
        inside = (r > self.r1) & (r < self.r2)
        rsafe = np.where(r > 0, r, 1.0)
        lap = -_smoothstep_d2(xi) / width**2 - _smoothstep_d1(xi) / (width * rsafe)
        out = np.where(inside, lap, 0.0)
        return out if out.ndim else float(out)

    def support_mask(self, grid: Grid2D) -> NDArray[np.bool_]:
        """Cells where the gradient can be nonzero (the radial bridge)."""
        X, Y = grid.mesh()
        r = np.hypot(X - self.center[0], Y - self.center[1])
        return (r > self.r1) & (r < self.r2)


def make_cutoff(center, r1: float, r2: float) -> CutoffFunction:
    """Build the standard radial cutoff: 1 on ``B_r1(center)``, 0 outside ``B_r2``."""
    return CutoffFunction(np.asarray(center, dtype=np.float64), float(r1), float(r2))


# ---------------------------------------------------------------------------
# Basic functionals
# ---------------------------------------------------------------------------

def total_mass(u: DensityField) -> float:
    """Mass of the field: cell area times the sum of the samples."""
    return float(u.grid.cell_area * u.values.sum())


def boundary_mass_fraction(u: DensityField, width: int = 1) -> float:
    """Fraction of the mass sitting within ``width`` cells of the box edge."""
    v = u.values
    total = float(v.sum())
    if total <= 0.0:
        return 0.0
    inner = float(v[width:-width, width:-width].sum())
    return (total - inner) / total


def _bilinear(grid: Grid2D, values: FloatArray, points: FloatArray) -> FloatArray:
    """Bilinear interpolation of cell-centered samples; vacuum outside."""
    pts = np.asarray(points, dtype=np.float64)
    x = pts[..., 0]
    y = pts[..., 1]
    # fractional cell-center index; centers at -L + (i + 1/2) h
    fx = (x + grid.L) / grid.h - 0.5
    fy = (y + grid.L) / grid.h - 0.5
    i0 = np.floor(fx).astype(np.int64)
    j0 = np.floor(fy).astype(np.int64)
    tx = fx - i0
    ty = fy - j0

    def sample(ii, jj):
        ok = (ii >= 0) & (ii < grid.n) & (jj >= 0) & (jj < grid.n)
        out = np.zeros(np.broadcast(ii, jj).shape)
        out[ok] = values[ii[ok], jj[ok]]
        return out

    v00 = sample(i0, j0)
    v10 = sample(i0 + 1, j0)
    v01 = sample(i0, j0 + 1)
    v11 = sample(i0 + 1, j0 + 1)
    return ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
            + (1 - tx) * ty * v01 + tx * ty * v11)


def sample_field(u: DensityField, points: FloatArray) -> FloatArray:
    """Bilinear sample of a density at arbitrary points (vacuum outside)."""
    return _bilinear(u.grid, u.values, points)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_snapshot(path, u: DensityField, t: float = 0.0) -> None:
    """Write a field snapshot: magic ``KSF1``, u32 n, f64 L, f64 t, n^2 f64."""
    p = Path(path)
    with open(p, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", u.grid.n))
        fh.write(struct.pack("<d", u.grid.L))
        fh.write(struct.pack("<d", float(t)))
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


def read_snapshot(path) -> tuple[DensityField, float]:
    """Read a ``KSF1`` snapshot back into ``(field, t)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _SNAPSHOT_MAGIC:
        raise DataError(f"{path}: not a KSF1 snapshot (magic {raw[:4]!r})")
    n = struct.unpack_from("<I", raw, 4)[0]
    L = struct.unpack_from("<d", raw, 8)[0]
    t = struct.unpack_from("<d", raw, 16)[0]
    expected = 24 + 8 * n * n
    if len(raw) != expected:
        raise DataError(f"{path}: truncated snapshot ({len(raw)} bytes, expected {expected})")
    values = np.frombuffer(raw, dtype="<f8", count=n * n, offset=24).reshape(n, n)
    return DensityField(Grid2D(L, n), values), t


def write_points(path, config: PointConfiguration) -> None:
    """Write a point configuration as CSV with header ``j,x,y,frame``."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["j", "x", "y", "frame"])
        for j, (x, y) in enumerate(config.points):
            writer.writerow([j, repr(float(x)), repr(float(y)), config.frame])


def read_points(path) -> PointConfiguration:
    """Read a point-configuration CSV written by :func:`write_points`."""
    rows = []
    frame = FRAME_PHYSICAL
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"j", "x", "y", "frame"}:
            raise DataError(f"{path}: expected header j,x,y,frame, got {reader.fieldnames}")
        for row in reader:
            rows.append((int(row["j"]), float(row["x"]), float(row["y"])))
            frame = row["frame"]
    rows.sort()
    pts = np.array([[x, y] for _, x, y in rows], dtype=np.float64)
    return PointConfiguration(pts, frame)
