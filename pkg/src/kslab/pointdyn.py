"""Singular-limit point dynamics and the renormalized-energy landscape.

Atoms attract pairwise with velocity ``4 (q_k - q_j) / |q_k - q_j|^2``; in
similarity variables the same law gains an outward drift ``p/2``.  The
renormalized flow is the exact negative gradient of

    flow_energy = -1/4 sum |p_j|^2 + 4 sum_{j<k} log |p_j - p_k|,

so that quantity is non-increasing along trajectories, and static
configurations of the flow are its critical points.  Collapse of the
physical flow is generic: clusters shrink in finite time, which the
integrator reports through the binary-collision extrapolation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    FRAME_PHYSICAL,
    FRAME_RENORMALIZED,
    DensityField,
    FloatArray,
    ForcingSpec,
    PointConfiguration,
    min_separation,
)
from .errors import CollisionError, SearchFailureError
from .potential import newtonian_gradient_at


@dataclass(frozen=True)
class FlowParams:
    """Adaptive integration and search controls for point flows."""

    dt_init: float = 1e-3
    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    min_separation_guard: float = 1e-6
    max_steps: int = 200_000

    def __post_init__(self) -> None:
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.min_separation_guard <= 0:
            raise ValueError("min_separation_guard must be positive")


# ---------------------------------------------------------------------------
# Velocity laws
# ---------------------------------------------------------------------------

def _pairwise_attraction(pts: FloatArray, guard: float = 0.0) -> FloatArray:
    """``4 sum_{k != j} (q_k - q_j)/|q_k - q_j|^2`` for every point."""
    n = pts.shape[0]
    if n == 1:
        return np.zeros_like(pts)
    diff = pts[None, :, :] - pts[:, None, :]        # diff[j, k] = q_k - q_j
    d2 = (diff**2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    dmin = float(np.sqrt(d2.min()))
    if dmin < guard:
        j, k = np.unravel_index(int(np.argmin(d2)), d2.shape)
        raise CollisionError(
            f"pair ({j}, {k}) at distance {dmin:.3e} below guard {guard:.3e}",
            pair=(int(j), int(k)))
    return 4.0 * (diff / d2[:, :, None]).sum(axis=1)


def point_velocities(config: PointConfiguration, guard: float = 0.0) -> FloatArray:
    """Velocity of every point under its frame's law.

    Physical frame: pure pairwise attraction (a single point is static).
    Renormalized frame: attraction plus the outward drift ``p/2``.
    """
    v = _pairwise_attraction(np.asarray(config.points), guard)
    if config.frame == FRAME_RENORMALIZED:
        v = v + 0.5 * config.points
    return v


def atom_velocities(config: PointConfiguration, rho: DensityField | None = None,
                    forcing: ForcingSpec | None = None, t: float = 0.0,
                    guard: float = 0.0) -> FloatArray:
    """Physical-frame atom velocities including the diffuse density's pull.

    The density contributes its attraction field evaluated at each atom (the
    same law that advects the density itself), the forcing its gradient.
    """
    if config.frame != FRAME_PHYSICAL:
        raise ValueError("atom dynamics with a background density is a physical-frame law")
    v = _pairwise_attraction(np.asarray(config.points), guard)
    if rho is not None:
        pull = np.array([newtonian_gradient_at(rho, q) for q in config.points])
        v = v + pull
    if forcing is not None and forcing.grad_f is not None:
        v = v + forcing.grad_f_at(config.points, t)
    return v


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------

def _log_distances(pts: FloatArray) -> float:
    n = pts.shape[0]
    if n < 2:
        return 0.0
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff**2).sum(axis=-1)
    iu = np.triu_indices(n, k=1)
    vals = d2[iu]
    if float(vals.min()) <= 0.0:
        raise CollisionError("coincident points have no pair energy")
    return 0.5 * float(np.log(vals).sum())  # sum over unordered pairs of log d


def pair_energy(config: PointConfiguration) -> float:
    """Log-interaction energy with each ordered pair counted: ``8 sum_{j<k} log d``."""
    return 8.0 * _log_distances(np.asarray(config.points))


def renormalized_energy(config: PointConfiguration) -> float:
    """Confined interaction energy ``-1/4 sum |p|^2 + 8 sum_{j<k} log d``.

    Ordered-pair counting, matching :func:`renormalized_energy_gradient`.
    """
    pts = np.asarray(config.points)
    return -0.25 * float((pts**2).sum()) + 8.0 * _log_distances(pts)


def renormalized_energy_gradient(config: PointConfiguration) -> FloatArray:
    """Exact gradient of :func:`renormalized_energy`.

    ``-p_j/2 + 8 sum_{k != j} (p_j - p_k)/|p_j - p_k|^2``.
    """
    pts = np.asarray(config.points)
    return -0.5 * pts - 2.0 * _pairwise_attraction(pts)


def flow_energy(config: PointConfiguration) -> float:
    """Lyapunov function of the renormalized flow (pairs counted once).

    ``-1/4 sum |p|^2 + 4 sum_{j<k} log d``; the flow is exactly its negative
    gradient, so it is non-increasing along trajectories and its critical
    points are the static configurations.
    """
    pts = np.asarray(config.points)
    return -0.25 * float((pts**2).sum()) + 4.0 * _log_distances(pts)


def flow_energy_gradient(config: PointConfiguration) -> FloatArray:
    """Gradient of :func:`flow_energy`; equals minus the renormalized velocity."""
    pts = np.asarray(config.points)
    return -0.5 * pts - _pairwise_attraction(pts)


# ---------------------------------------------------------------------------
# Adaptive integration (Fehlberg 4(5) embedded pair)
# ---------------------------------------------------------------------------

_RKF_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_RKF_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_RKF_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)
_RKF_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)


@dataclass
class PointTrajectory:
    """Accepted states of one integrated point flow."""

    frame: str
    times: FloatArray                  # (M,)
    points: FloatArray                 # (M, N, 2)
    pair_energies: FloatArray          # (M,)
    renormalized_energies: FloatArray  # (M,)
    flow_energies: FloatArray          # (M,)
    collapse_time: float | None = None
    collision_pair: tuple[int, int] | None = None
    flow_monotone: bool = True

    @property
    def final(self) -> PointConfiguration:
        return PointConfiguration(self.points[-1], self.frame)


def _binary_collapse_estimate(pts: FloatArray, t: float) -> tuple[float, tuple[int, int]]:
    """Extrapolated collision time: an isolated pair obeys d(s^2)/dt = -16."""
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff**2).sum(axis=-1)
    np.fill_diagonal(d2, np.inf)
    j, k = np.unravel_index(int(np.argmin(d2)), d2.shape)
    return t + float(d2[j, k]) / 16.0, (int(j), int(k))


def integrate_flow(config: PointConfiguration, params: FlowParams | None = None,
                   duration: float = 1.0, *, t0: float = 0.0,
                   rho: DensityField | None = None,
                   forcing: ForcingSpec | None = None) -> PointTrajectory:
    """Integrate the frame's flow with the embedded 4(5) pair.

    Steps are accepted on the embedded error estimate and rejected on
    separation-guard violations.  A physical-frame cluster generically
    collapses: integration then stops early and ``collapse_time`` carries
    the binary-collision extrapolation of the singular time.
    """
    params = params or FlowParams()
    if duration <= 0:
        raise ValueError("duration must be positive")

    def rhs(pts: FloatArray, t: float) -> FloatArray:
        cfg = PointConfiguration(pts, config.frame)
        if rho is not None or forcing is not None:
            return atom_velocities(cfg, rho, forcing, t, params.min_separation_guard)
        return point_velocities(cfg, params.min_separation_guard)

    t = t0
    t_end = t0 + duration
    y = np.array(config.points, dtype=np.float64)
    dt = min(params.dt_init, duration)

    times = [t]
    states = [y.copy()]
    collapse_time: float | None = None
    collision_pair: tuple[int, int] | None = None
    monotone = True
    prev_flow = _safe_flow_energy(y, config.frame)

    steps = 0
    while t < t_end - 1e-14 * max(1.0, abs(t_end)) and steps < params.max_steps:
        steps += 1
        dt = min(dt, t_end - t)
        try:
            k = [rhs(y, t)]
            for i in range(1, 6):
                yi = y + dt * sum(a * ki for a, ki in zip(_RKF_A[i], k))
                k.append(rhs(yi, t + _RKF_C[i] * dt))
            y5 = y + dt * sum(b * ki for b, ki in zip(_RKF_B5, k))
            y4 = y + dt * sum(b * ki for b, ki in zip(_RKF_B4, k))
        except CollisionError as exc:
            if dt > 1e-14 * max(1.0, abs(t)):
                dt *= 0.5
                continue
            collapse_time, collision_pair = _binary_collapse_estimate(y, t)
            if exc.pair is not None:
                collision_pair = exc.pair
            break

        scale = params.abs_tol + params.rel_tol * np.abs(y5)
        err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
        if err <= 1.0:
            if min_separation(y5) < params.min_separation_guard:
                if dt > 1e-14 * max(1.0, abs(t)):
                    dt *= 0.5
                    continue
                collapse_time, collision_pair = _binary_collapse_estimate(y, t)
                break
            t += dt
            y = y5
            times.append(t)
            states.append(y.copy())
            if config.frame == FRAME_RENORMALIZED:
                fe = _safe_flow_energy(y, config.frame)
                if fe > prev_flow + 1e-10 * (1.0 + abs(prev_flow)):
                    monotone = False
                prev_flow = fe
        factor = 0.9 * err ** (-0.2) if err > 0 else 5.0
        dt *= min(5.0, max(0.2, factor))

    pts_arr = np.array(states)
    traj = PointTrajectory(
        frame=config.frame,
        times=np.array(times),
        points=pts_arr,
        pair_energies=np.array([_energy_or_nan(pair_energy, s, config.frame) for s in states]),
        renormalized_energies=np.array(
            [_energy_or_nan(renormalized_energy, s, config.frame) for s in states]),
        flow_energies=np.array([_safe_flow_energy(s, config.frame) for s in states]),
        collapse_time=collapse_time,
        collision_pair=collision_pair,
        flow_monotone=monotone,
    )
    return traj


def _energy_or_nan(fn, pts: FloatArray, frame: str) -> float:
    try:
        return fn(PointConfiguration(pts, frame))
    except (CollisionError, ValueError):
        return math.nan


def _safe_flow_energy(pts: FloatArray, frame: str) -> float:
    return _energy_or_nan(flow_energy, pts, frame)


def to_renormalized(points: FloatArray, t: float, collapse_time: float) -> tuple[FloatArray, float]:
    """Map physical points at time ``t`` into similarity coordinates.

    ``p = q / sqrt(collapse_time - t)``, ``s = -log(collapse_time - t)``.
    """
    gap = collapse_time - t
    if not gap > 0:
        raise ValueError("similarity map needs t strictly before the collapse time")
    return np.asarray(points) / math.sqrt(gap), -math.log(gap)


def write_trajectory_csv(path, traj: PointTrajectory) -> None:
    """CSV rows ``s_or_t, j, x, y, W, calW``; frame and collapse time in a comment."""
    with open(Path(path), "w", newline="") as fh:
        meta = f"# frame={traj.frame}"
        if traj.collapse_time is not None:
            meta += f" collapse_time={traj.collapse_time!r}"
        fh.write(meta + "\n")
        writer = csv.writer(fh)
        writer.writerow(["s_or_t", "j", "x", "y", "W", "calW"])
        for m, t in enumerate(traj.times):
            for j in range(traj.points.shape[1]):
                writer.writerow([repr(float(t)), j,
                                 repr(float(traj.points[m, j, 0])),
                                 repr(float(traj.points[m, j, 1])),
                                 repr(float(traj.pair_energies[m])),
                                 repr(float(traj.renormalized_energies[m]))])


# ---------------------------------------------------------------------------
# Critical points of the renormalized energy
# ---------------------------------------------------------------------------

def _flow_jacobian(pts: FloatArray) -> FloatArray:
    """Jacobian of the renormalized velocity, (2N, 2N)."""
    n = pts.shape[0]
    jac = np.zeros((n, 2, n, 2))
    eye = np.eye(2)
    for j in range(n):
        jac[j, :, j, :] += 0.5 * eye
        for kk in range(n):
            if kk == j:
                continue
            r = pts[kk] - pts[j]
            r2 = float(r @ r)
            dg = (eye * r2 - 2.0 * np.outer(r, r)) / r2**2
            jac[j, :, kk, :] += 4.0 * dg
            jac[j, :, j, :] -= 4.0 * dg
    return jac.reshape(2 * n, 2 * n)


def _residual(pts: FloatArray) -> FloatArray:
    return _pairwise_attraction(pts) + 0.5 * pts


def _newton_polish(pts: FloatArray, tol: float, max_iter: int = 60) -> tuple[FloatArray, float]:
    """Least-squares Newton on the flow residual (rotation mode is harmless)."""
    y = pts.copy()
    res = _residual(y)
    norm = float(np.abs(res).max())
    for _ in range(max_iter):
        if norm <= tol:
            break
        step, *_ = np.linalg.lstsq(_flow_jacobian(y), -res.reshape(-1), rcond=None)
        lam = 1.0
        for _ in range(40):
            cand = y + lam * step.reshape(y.shape)
            if min_separation(cand) > 0:
                cres = _residual(cand)
                cnorm = float(np.abs(cres).max())
                if cnorm < norm:
                    y, res, norm = cand, cres, cnorm
                    break
            lam *= 0.5
        else:
            break
    return y, norm


def _relax_backward(pts: FloatArray, guard: float, s_span: float = 40.0) -> FloatArray:
    """Follow the time-reversed renormalized flow toward a critical set.

    Critical configurations are energy maxima along the scaling direction,
    so the forward flow escapes them while the reversed flow is attracted;
    this supplies a robust initial guess for the Newton polish.
    """
    y = pts.copy()
    s = 0.0
    dt = 1e-3
    while s < s_span:
        try:
            v = -(_pairwise_attraction(y, guard) + 0.5 * y)
            y_mid = y + 0.5 * dt * v
            v_mid = -(_pairwise_attraction(y_mid, guard) + 0.5 * y_mid)
            y_new = y + dt * v_mid
        except CollisionError:
            dt *= 0.5
            if dt < 1e-12:
                break
            continue
        if min_separation(y_new) < guard:
            dt *= 0.5
            if dt < 1e-12:
                break
            continue
        step_size = float(np.abs(y_new - y).max())
        y = y_new
        s += dt
        dt = min(dt * 1.3, 0.25)
        if step_size < 1e-13:
            break
    return y


def _ring(n: int, radius: float, phase: float = 0.0) -> FloatArray:
    ang = phase + 2.0 * math.pi * np.arange(n) / n
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def find_critical_point(config: PointConfiguration, params: FlowParams | None = None,
                        *, seed: int = 0) -> PointConfiguration:
    """Find a static configuration of the renormalized flow near the input.

    Relaxes along the reversed flow (the forward flow leaves critical points
    through the scaling instability), then polishes with damped least-squares
    Newton; falls back to ring-shaped multistarts.  Raises
    :class:`SearchFailureError` with the final residual if no start reaches
    the tolerance.
    """
    params = params or FlowParams()
    pts0 = np.array(config.points, dtype=np.float64)
    n = pts0.shape[0]
    tol = max(params.abs_tol, 1e-13)

    if n == 1:
        return PointConfiguration(np.zeros((1, 2)), FRAME_RENORMALIZED)

    rng = np.random.default_rng(seed)
    starts: list[FloatArray] = [pts0]
    base_r = 2.0 * math.sqrt(n - 1.0)
    for trial in range(4):
        phase = float(rng.uniform(0, 2 * math.pi))
        ring = _ring(n, base_r, phase)
        if trial >= 2:
            ring = ring + rng.normal(scale=0.1 * base_r, size=ring.shape)
        starts.append(ring)

    best_norm = math.inf
    for start in starts:
        try:
            relaxed = _relax_backward(start, params.min_separation_guard)
            polished, norm = _newton_polish(relaxed, tol)
        except (CollisionError, np.linalg.LinAlgError):
            continue
        best_norm = min(best_norm, norm)
        if norm <= tol and min_separation(polished) > params.min_separation_guard:
            return PointConfiguration(polished, FRAME_RENORMALIZED)
    raise SearchFailureError(
        f"no static configuration found (best residual {best_norm:.3e})",
        residual=best_norm)
