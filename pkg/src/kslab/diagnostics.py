"""Scalar functionals, moment identities and concentration detection.

The central computational identity: for a C^2 test function ``psi`` the mass
weighted by ``psi`` evolves as

    d/dt int u psi = int u lap(psi) + int u grad_f . grad(psi) + int g psi
                     - (1/4pi) iint K_psi(x, y) u(x) u(y) dx dy,

where ``K_psi(x, y) = (x - y) . [grad psi(x) - grad psi(y)] / |x - y|^2`` is
the bounded symmetrized kernel.  Everything else here (second-moment rates,
quantization checks, the concentration detector) is built on top of it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.fft

from ._threads import thread_count
from .core import (
    ATOM_MASS,
    ConcentrationThresholds,
    CutoffFunction,
    DensityField,
    FloatArray,
    ForcingSpec,
    Grid2D,
    HybridState,
    PointConfiguration,
    total_mass,
)
from .errors import DetectionFailureError

_PAIR_CHUNK = 256  # rows of the pair matrix materialized at once


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

def weighted_moment(u: DensityField, psi: CutoffFunction, order: int):
    """Cutoff-weighted moment of the density.

    order 0: ``int u psi``; order 1: the vector ``int x u psi``;
    order 2: ``int |x - c|^2 u psi`` with ``c`` the cutoff center.
    """
    grid = u.grid
    X, Y = grid.mesh()
    pts = np.stack([X, Y], axis=-1)
    w = u.values * psi.value(pts) * grid.cell_area
    if order == 0:
        return float(w.sum())
    if order == 1:
        return np.array([float((X * w).sum()), float((Y * w).sum())])
    if order == 2:
        r2 = (X - psi.center[0]) ** 2 + (Y - psi.center[1]) ** 2
        return float((r2 * w).sum())
    raise ValueError(f"order must be 0, 1 or 2, got {order}")


def first_moment(u: DensityField) -> FloatArray:
    """Plain first moment ``int x u dx`` about the origin."""
    X, Y = u.grid.mesh()
    w = u.values * u.grid.cell_area
    return np.array([float((X * w).sum()), float((Y * w).sum())])


def second_moment(u: DensityField, center=(0.0, 0.0)) -> float:
    """Plain second moment ``int |x - c|^2 u dx``."""
    X, Y = u.grid.mesh()
    r2 = (X - center[0]) ** 2 + (Y - center[1]) ** 2
    return float((r2 * u.values).sum() * u.grid.cell_area)


# ---------------------------------------------------------------------------
# Symmetrized kernel and the weighted-mass rate
# ---------------------------------------------------------------------------

_DIAG_TOL = 1e-14


def symmetrized_kernel(psi: CutoffFunction, x, y) -> float:
    """``(x - y) . [grad psi(x) - grad psi(y)] / |x - y|^2``; 0 on the diagonal.

    Bounded by a multiple of the C^2 norm of ``psi`` even though the factors
    are singular; the value at coincident points is irrelevant under the
    symmetric double integrals it appears in, and is pinned to 0.
    """
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    d = xv - yv
    r2 = float(d @ d)
    if r2 < _DIAG_TOL**2:
        return 0.0
    dg = psi.gradient(xv) - psi.gradient(yv)
    return float(d @ dg) / r2


def _kernel_block(xa: FloatArray, ga: FloatArray, xb: FloatArray, gb: FloatArray) -> FloatArray:
    """Kernel on a block of pairs: xa (A,2), xb (B,2) with their gradients."""
    dx = xa[:, None, 0] - xb[None, :, 0]
    dy = xa[:, None, 1] - xb[None, :, 1]
    r2 = dx * dx + dy * dy
    num = dx * (ga[:, None, 0] - gb[None, :, 0]) + dy * (ga[:, None, 1] - gb[None, :, 1])
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(r2 > _DIAG_TOL**2, num / np.where(r2 > 0, r2, 1.0), 0.0)
    return out


def _pair_sum(xa, ga, wa, xb, gb, wb) -> float:
    """``sum_ab K(x_a, x_b) w_a w_b`` chunked over the first index."""
    total = 0.0
    for lo in range(0, xa.shape[0], _PAIR_CHUNK):
        hi = lo + _PAIR_CHUNK
        block = _kernel_block(xa[lo:hi], ga[lo:hi], xb, gb)
        total += float(wa[lo:hi] @ block @ wb)
    return total


def interaction_pair_sum(u: DensityField, psi: CutoffFunction) -> float:
    """``iint K_psi(x, y) u(x) u(y) dx dy`` using the kernel's exact sparsity.

    The kernel vanishes whenever both gradients do, so only pairs with at
    least one point in the gradient annulus contribute.
    """
    grid = u.grid
    X, Y = grid.mesh()
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    w = u.values.ravel() * grid.cell_area
    grads = psi.gradient(pts)
    active = (grads[:, 0] != 0.0) | (grads[:, 1] != 0.0)
    live = w != 0.0
    a = active & live
    b = live
    if not a.any():
        return 0.0
    s_all = _pair_sum(pts[a], grads[a], w[a], pts[b], grads[b], w[b])
    s_act = _pair_sum(pts[a], grads[a], w[a], pts[a], grads[a], w[a])
    return 2.0 * s_all - s_act


def weighted_mass_rate(u: DensityField, psi: CutoffFunction,
                       forcing: ForcingSpec | None = None, t: float = 0.0) -> float:
    """Right-hand side of the evolution law for ``int u psi``."""
    forcing = forcing or ForcingSpec()
    grid = u.grid
    X, Y = grid.mesh()
    pts = np.stack([X, Y], axis=-1)
    area = grid.cell_area
    rate = float((u.values * psi.laplacian(pts)).sum() * area)
    if forcing.grad_f is not None:
        gf = forcing.grad_f_at(pts, t)
        gp = psi.gradient(pts)
        rate += float((u.values * (gf[..., 0] * gp[..., 0] + gf[..., 1] * gp[..., 1])).sum() * area)
    g = forcing.g_on(grid, t)
    if g is not None:
        rate += float((g * psi.value(pts)).sum() * area)
    rate -= interaction_pair_sum(u, psi) / (4.0 * math.pi)
    return rate


# ---------------------------------------------------------------------------
# Second-moment rates and the quantization law
# ---------------------------------------------------------------------------

def second_moment_rate(mass: float) -> float:
    """Exact growth rate of the second moment at total mass ``m``.

    ``4 m - m^2 / (2 pi)``: positive below the critical mass, zero exactly
    at ``8 pi`` and negative above, which is what forces finite-time
    concentration of supercritical data.
    """
    if mass < 0:
        raise ValueError("mass must be nonnegative")
    return 4.0 * mass - mass**2 / (2.0 * math.pi)


def _measure_arrays(state, grid_hint: Grid2D | None = None):
    """Flatten a density / hybrid state into points, weights and a grid."""
    if isinstance(state, HybridState):
        rho, atoms = state.rho, state.atoms
    elif isinstance(state, DensityField):
        rho, atoms = state, None
    else:
        raise TypeError(f"expected DensityField or HybridState, got {type(state)!r}")
    grid = rho.grid
    X, Y = grid.mesh()
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    w = rho.values.ravel() * grid.cell_area
    if atoms is not None and atoms.n_points:
        pts = np.concatenate([atoms.points, pts], axis=0)
        w = np.concatenate([np.full(atoms.n_points, ATOM_MASS), w])
    return pts, w, grid


def _window_weight_gradient(window: CutoffFunction, pts: FloatArray):
    """Value and gradient of ``w(x) = |x - c|^2 psi2(x)`` at the given points."""
    rel = pts - window.center
    r2 = (rel**2).sum(axis=-1)
    val = window.value(pts)
    grad = 2.0 * rel * val[..., None] + r2[..., None] * window.gradient(pts)
    return r2, val, grad


@dataclass(frozen=True)
class WindowWeight:
    """Test function ``|x - c|^2 psi2(x)``: the localized second-moment weight.

    Exposes the same evaluation interface as :class:`CutoffFunction` so it
    can be fed to the generic weighted-mass machinery.
    """

    window: CutoffFunction

    @property
    def center(self) -> FloatArray:
        return self.window.center

    def value(self, points: FloatArray) -> FloatArray:
        pts = np.asarray(points, dtype=np.float64)
        rel = pts - self.window.center
        return (rel**2).sum(axis=-1) * self.window.value(pts)

    def gradient(self, points: FloatArray) -> FloatArray:
        pts = np.asarray(points, dtype=np.float64)
        _, _, grad = _window_weight_gradient(self.window, pts)
        return grad

    def laplacian(self, points: FloatArray) -> FloatArray:
        pts = np.asarray(points, dtype=np.float64)
        rel = pts - self.window.center
        r2 = (rel**2).sum(axis=-1)
        gpsi = self.window.gradient(pts)
        return (4.0 * self.window.value(pts) + 4.0 * (rel * gpsi).sum(axis=-1)
                + r2 * self.window.laplacian(pts))


def localized_second_moment_rate(state, window: CutoffFunction) -> float:
    """Rate of the window-localized second moment of a measure.

    Evaluates ``4 int psi2 dmu - (1/2pi) (int psi2 dmu)^2
    + int [|x-c|^2 lap psi2 + 4 (x-c).grad psi2] dmu + iint Phi dmu dmu``
    where ``Phi(x,y) = (1/2pi) psi2(x) psi2(y) - (1/4pi) K_w(x,y)`` for the
    weight ``w = |x-c|^2 psi2``.  ``Phi`` vanishes identically when both
    points sit in the plateau of ``psi2`` or both sit outside its support,
    so only window-boundary pairs are summed.

    For a measure fully inside the plateau this reduces to the pure mass law
    ``4 m - m^2/(2 pi)`` including the atom self-interaction, which encodes
    the quantization of atom mass.
    """
    pts, w, _ = _measure_arrays(state)
    live = w != 0.0
    pts, w = pts[live], w[live]
    if pts.shape[0] == 0:
        return 0.0
    r2, val, grad = _window_weight_gradient(window, pts)
    rel = pts - window.center
    lap = window.laplacian(pts)
    gpsi = window.gradient(pts)

    m_psi = float(w @ val)
    rate = 4.0 * m_psi - m_psi**2 / (2.0 * math.pi)
    rate += float(w @ (r2 * lap + 4.0 * (rel * gpsi).sum(axis=-1)))

    # Phi pair sum over the sparse pattern: every pair except plateau-plateau
    # and outside-outside.
    plateau = val == 1.0
    outside = val == 0.0
    middle = ~plateau & ~outside

    def phi_sum(sel_a, sel_b) -> float:
        if not sel_a.any() or not sel_b.any():
            return 0.0
        xa, xb = pts[sel_a], pts[sel_b]
        total = 0.0
        for lo in range(0, xa.shape[0], _PAIR_CHUNK):
            hi = lo + _PAIR_CHUNK
            kw = _kernel_block(xa[lo:hi], grad[sel_a][lo:hi], xb, grad[sel_b])
            dx = xa[lo:hi, None, :] - xb[None, :, :]
            off_diag = (dx**2).sum(axis=-1) > _DIAG_TOL**2
            phi = np.where(
                off_diag,
                val[sel_a][lo:hi, None] * val[sel_b][None, :] / (2.0 * math.pi)
                - kw / (4.0 * math.pi),
                0.0,
            )
            total += float(w[sel_a][lo:hi] @ phi @ w[sel_b])
        return total

    s_mid_all = phi_sum(middle, np.ones_like(middle))
    s_mid_mid = phi_sum(middle, middle)
    s_po = phi_sum(plateau, outside)
    rate += 2.0 * s_mid_all - s_mid_mid + 2.0 * s_po
    return rate


# ---------------------------------------------------------------------------
# Free energy and entropy
# ---------------------------------------------------------------------------

_log_kernel_cache: dict[tuple[float, int], FloatArray] = {}


def _log_kernel_fft(grid: Grid2D) -> FloatArray:
    key = (grid.L, grid.n)
    cached = _log_kernel_cache.get(key)
    if cached is not None:
        return cached
    n = grid.n
    m = 2 * n
    off = np.arange(m)
    off = np.where(off < n, off, off - m).astype(np.float64) * grid.h
    r2 = off[:, None] ** 2 + off[None, :] ** 2
    with np.errstate(divide="ignore"):
        k = 0.5 * np.log(r2)
    # exact mean of log|.| over one square cell removes the dominant bias
    k[0, 0] = math.log(grid.h) - 1.5 - 0.5 * math.log(2.0) + math.pi / 4.0
    with scipy.fft.set_workers(thread_count()):
        out = scipy.fft.rfft2(k)
    if len(_log_kernel_cache) > 8:
        _log_kernel_cache.clear()
    _log_kernel_cache[key] = out
    return out


def log_potential(u: DensityField) -> FloatArray:
    """``(log|.| * u)(x_i)`` on the grid via zero-padded FFT convolution."""
    grid = u.grid
    n = grid.n
    pad = np.zeros((2 * n, 2 * n))
    pad[:n, :n] = u.values
    with scipy.fft.set_workers(thread_count()):
        conv = scipy.fft.irfft2(_log_kernel_fft(grid) * scipy.fft.rfft2(pad),
                                s=(2 * n, 2 * n))[:n, :n]
    return conv * grid.cell_area


def entropy(u: DensityField) -> float:
    """``int u log u`` over the cells with positive density."""
    v = u.values
    pos = v > 0.0
    if not pos.any():
        return 0.0
    return float((v[pos] * np.log(v[pos])).sum() * u.grid.cell_area)


def free_energy(u: DensityField) -> float:
    """Lyapunov functional: entropy plus the logarithmic interaction.

    ``int u log u + (1/4pi) iint log|x-y| u(x) u(y)``.  Scale-invariant
    exactly at the critical mass ``8 pi``; decreasing along smooth flows.
    """
    inter = float((u.values * log_potential(u)).sum() * u.grid.cell_area)
    return entropy(u) + inter / (4.0 * math.pi)


# ---------------------------------------------------------------------------
# Local mass and concentration detection
# ---------------------------------------------------------------------------

_disk_cache: dict[tuple[float, int, float], FloatArray] = {}


def _disk_kernel_fft(grid: Grid2D, r: float) -> FloatArray:
    key = (grid.L, grid.n, r)
    cached = _disk_cache.get(key)
    if cached is not None:
        return cached
    n = grid.n
    m = 2 * n
    off = np.arange(m)
    off = np.where(off < n, off, off - m).astype(np.float64) * grid.h
    mask = (off[:, None] ** 2 + off[None, :] ** 2) <= r * r
    with scipy.fft.set_workers(thread_count()):
        out = scipy.fft.rfft2(mask.astype(np.float64))
    if len(_disk_cache) > 16:
        _disk_cache.clear()
    _disk_cache[key] = out
    return out


def local_mass_map(u: DensityField, r: float) -> FloatArray:
    """Mass inside the disk of radius ``r`` around every cell center."""
    grid = u.grid
    if not 0.0 < r < grid.L:
        raise ValueError(f"radius must lie in (0, L), got {r}")
    n = grid.n
    pad = np.zeros((2 * n, 2 * n))
    pad[:n, :n] = u.values
    with scipy.fft.set_workers(thread_count()):
        conv = scipy.fft.irfft2(_disk_kernel_fft(grid, r) * scipy.fft.rfft2(pad),
                                s=(2 * n, 2 * n))[:n, :n]
    # binary kernel: clip FFT noise so the map is nonnegative and bounded
    np.clip(conv, 0.0, None, out=conv)
    return conv * grid.cell_area


def max_local_mass(u: DensityField, r: float) -> tuple[float, FloatArray]:
    """Largest disk mass at radius ``r`` and the cell center achieving it."""
    m = local_mass_map(u, r)
    flat = int(np.argmax(m))
    i, j = divmod(flat, u.grid.n)
    c = u.grid.centers()
    value = min(float(m[i, j]), total_mass(u))  # quadrature can overshoot by eps
    return value, np.array([c[i], c[j]])


@dataclass(frozen=True)
class DetectionResult:
    """Outcome of atom detection: positions, leftover mass and a verdict."""

    atoms: PointConfiguration
    residual_mass: float
    total_mass: float
    genuine: bool
    objective: float


def _well_profile(s: FloatArray, a: float, b: float):
    """Saturating quadratic well in the squared radius: value and derivative.

    Equals ``s`` below ``a``, flattens to the constant ``a + (b - a)/2``
    above ``b`` with a smoothstep-damped slope in between.
    """
    xi = np.clip((s - a) / (b - a), 0.0, 1.0)
    slope = np.where(s <= a, 1.0, 1.0 - (xi * xi * xi * (10.0 + xi * (-15.0 + 6.0 * xi))))
    # closed form of int_0^xi (1 - S(tau)) dtau for the quintic smoothstep
    anti = xi - (2.5 * xi**4 - 3.0 * xi**5 + xi**6)
    value = np.where(s <= a, s, a + (b - a) * anti)
    return value, slope


def detect_atoms(u: DensityField, thresholds: ConcentrationThresholds, n_atoms: int,
                 *, seed: int = 0, max_iter: int = 400) -> DetectionResult:
    """Locate concentration atoms by weighted-well minimization.

    Minimizes ``int omega(x; p_1..p_N) u dx`` where ``omega`` is a quadratic
    well ``|x - p_j|^2`` near each candidate and saturates to a constant away
    from all of them.  Seeded from the strongest disk-mass peaks, refined by
    multi-start gradient descent; reports the mass not captured within
    ``detect_radius`` of any returned atom.
    """
    if n_atoms < 1:
        raise ValueError("n_atoms must be >= 1")
    grid = u.grid
    r_d = thresholds.detect_radius
    a = (2.0 * r_d) ** 2
    b = (4.0 * r_d) ** 2
    X, Y = grid.mesh()
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    w = u.values.ravel() * grid.cell_area
    total = float(w.sum())

    seeds = _peak_seeds(u, r_d, n_atoms)
    rng = np.random.default_rng(seed)
    starts = [seeds]
    for _ in range(2):
        starts.append(seeds + rng.normal(scale=r_d, size=seeds.shape))

    best = None
    for start in starts:
        p, obj, ok = _descend_wells(pts, w, start.copy(), a, b, max_iter)
        if ok and (best is None or obj < best[1]):
            best = (p, obj)
    if best is None:
        raise DetectionFailureError(
            f"well minimization did not converge within {max_iter} iterations")
    p, obj = best

    d2 = ((pts[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)
    captured = float(w[(d2 <= r_d * r_d).any(axis=1)].sum())
    residual = max(total - captured, 0.0)
    genuine = residual <= 0.25 * total if total > 0 else False
    atoms = PointConfiguration(p) if _distinct(p) else PointConfiguration(
        p + np.arange(n_atoms)[:, None] * [1e-9, 0.0])
    return DetectionResult(atoms=atoms, residual_mass=residual, total_mass=total,
                           genuine=genuine, objective=obj)


def _distinct(p: FloatArray) -> bool:
    if p.shape[0] < 2:
        return True
    d = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(d, np.inf)
    return bool(d.min() > 0.0)


def _peak_seeds(u: DensityField, r_d: float, n_atoms: int) -> FloatArray:
    """Strongest disk-mass peaks with non-maximum suppression."""
    grid = u.grid
    m = local_mass_map(u, r_d).copy()
    c = grid.centers()
    seeds = []
    for _ in range(n_atoms):
        flat = int(np.argmax(m))
        i, j = divmod(flat, grid.n)
        seeds.append([c[i], c[j]])
        X, Y = grid.mesh()
        m[np.hypot(X - c[i], Y - c[j]) <= 4.0 * r_d] = -np.inf
    return np.asarray(seeds, dtype=np.float64)


def _descend_wells(pts, w, p, a, b, max_iter):
    """Gradient descent with Newton-scaled steps and Armijo backtracking."""
    n_atoms = p.shape[0]

    def objective_and_grad(p):
        d2 = ((pts[:, None, :] - p[None, :, :]) ** 2).sum(axis=-1)  # (M, N)
        nearest = np.argmin(d2, axis=1)
        s = d2[np.arange(d2.shape[0]), nearest]
        value, slope = _well_profile(s, a, b)
        obj = float(w @ value)
        grad = np.zeros_like(p)
        scale = np.zeros(n_atoms)
        for j in range(n_atoms):
            sel = (nearest == j) & (slope > 0.0) & (w != 0.0)
            if not sel.any():
                continue
            ww = w[sel] * slope[sel]
            grad[j] = -2.0 * (ww[:, None] * (pts[sel] - p[j])).sum(axis=0)
            scale[j] = 2.0 * ww.sum()
        return obj, grad, scale

    obj, grad, scale = objective_and_grad(p)
    tol = 1e-12 * max(1.0, math.sqrt(a))
    for _ in range(max_iter):
        step = np.where(scale[:, None] > 0, 1.0 / np.maximum(scale[:, None], 1e-300), 0.0)
        dp = -step * grad
        if np.abs(dp).max() < tol:
            return p, obj, True
        lam = 1.0
        for _ in range(30):
            cand = p + lam * dp
            new_obj, new_grad, new_scale = objective_and_grad(cand)
            if new_obj <= obj + 1e-12 * abs(obj):
                p, obj, grad, scale = cand, new_obj, new_grad, new_scale
                break
            lam *= 0.5
        else:
            return p, obj, True  # stuck at a flat spot: accept current point
    return p, obj, False


# ---------------------------------------------------------------------------
# Diagnostics records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiagnosticsRecord:
    """Scalar diagnostics of one density snapshot."""

    t: float
    mass: float
    first_momentum: FloatArray
    second_momentum: float
    free_energy: float
    entropy: float
    max_density: float
    local_mass_sup: float
    concentration_flag: bool


def compute_record(u: DensityField, t: float,
                   thresholds: ConcentrationThresholds) -> DiagnosticsRecord:
    """Evaluate the standard diagnostics bundle for one snapshot."""
    sup, _ = max_local_mass(u, thresholds.detect_radius)
    return DiagnosticsRecord(
        t=float(t),
        mass=total_mass(u),
        first_momentum=first_moment(u),
        second_momentum=second_moment(u),
        free_energy=free_energy(u),
        entropy=entropy(u),
        max_density=float(u.values.max()) if u.values.size else 0.0,
        local_mass_sup=sup,
        concentration_flag=bool(sup >= 0.8 * ATOM_MASS),
    )


def standard_observer(thresholds: ConcentrationThresholds):
    """Observer for the evolution loop: snapshot -> DiagnosticsRecord."""

    def observe(t: float, u: DensityField) -> DiagnosticsRecord:
        return compute_record(u, t, thresholds)

    return observe


def ndjson_line(record: DiagnosticsRecord) -> str:
    """Canonical one-line JSON form of a record (stable key order)."""
    payload = {
        "t": record.t,
        "mass": record.mass,
        "m1": [float(record.first_momentum[0]), float(record.first_momentum[1])],
        "m2": record.second_momentum,
        "F": record.free_energy,
        "entropy": record.entropy,
        "max_u": record.max_density,
        "local_mass_sup": record.local_mass_sup,
        "concentration": record.concentration_flag,
    }
    return json.dumps(payload, separators=(", ", ": "))
