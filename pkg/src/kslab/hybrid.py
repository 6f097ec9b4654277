"""Co-evolution of concentration atoms with a diffuse background density.

The limit system couples point atoms of fixed mass ``8 pi`` to a smooth
density: the density is advected by the atoms' singular attraction fields
plus its own, while each atom feels the other atoms and the density's pull.
The singular atom field is mollified on a three-cell scale to keep the
advective CFL finite; no mass is ever exchanged between the two parts, and
a run is flagged invalid if the density starts concentrating onto an atom
(continuation through an atom-mass jump is out of scope by design).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ATOM_MASS,
    ConcentrationThresholds,
    DensityField,
    FloatArray,
    ForcingSpec,
    HybridState,
    PointConfiguration,
    total_mass,
)
from .diagnostics import DiagnosticsRecord, local_mass_map
from .pde import SolverParams, _accept, _flux_divergence, _stable_dt, _velocity
from .pde import step as density_step
from .pointdyn import FlowParams, atom_velocities
from .potential import newtonian_gradient

#: Mollification radius of the atom attraction field, in cells.
MOLL_CELLS = 3.0


def _atom_field(atoms: PointConfiguration, grid, r_moll: float) -> tuple[FloatArray, FloatArray]:
    """Mollified superposition of atom attraction fields on the grid.

    ``-4 (x - q) / (|x - q|^2 + r_moll^2)`` per atom: equals the singular
    field up to one percent beyond ten mollification radii.
    """
    X, Y = grid.mesh()
    ax = np.zeros_like(X)
    ay = np.zeros_like(Y)
    for q in atoms.points:
        dx = X - q[0]
        dy = Y - q[1]
        denom = dx * dx + dy * dy + r_moll * r_moll
        ax -= 4.0 * dx / denom
        ay -= 4.0 * dy / denom
    return ax, ay


def _check_mollifiable(state: HybridState, r_moll: float) -> None:
    L = state.rho.grid.L
    if state.atoms is None:
        return
    for q in state.atoms.points:
        if L - max(abs(float(q[0])), abs(float(q[1]))) < r_moll:
            raise ValueError(
                f"atom at {tuple(q)} too close to the boundary to mollify (need {r_moll})")


def hybrid_velocity(state: HybridState, forcing: ForcingSpec | None = None,
                    t: float | None = None) -> tuple[FloatArray, FloatArray]:
    """Advecting velocity of the density: atoms + own attraction + forcing."""
    forcing = forcing or ForcingSpec()
    tt = state.t if t is None else t
    ax, ay = _velocity(state.rho, forcing, tt, attraction=True)
    if state.n_atoms:
        r_moll = MOLL_CELLS * state.rho.grid.h
        _check_mollifiable(state, r_moll)
        bx, by = _atom_field(state.atoms, state.rho.grid, r_moll)
        ax = ax + bx
        ay = ay + by
    return ax, ay


def density_rate(state: HybridState, forcing: ForcingSpec | None = None,
                 t: float | None = None) -> FloatArray:
    """Rate of change of the diffuse density within the hybrid system.

    Without atoms this is exactly the plain field-solver rate.
    """
    forcing = forcing or ForcingSpec()
    tt = state.t if t is None else t
    from .pde import rhs as plain_rhs

    if not state.n_atoms:
        return plain_rhs(state.rho, forcing, tt)
    ax, ay = hybrid_velocity(state, forcing, tt)
    rate = _flux_divergence(state.rho.values, ax, ay, state.rho.grid.h)
    g = forcing.g_on(state.rho.grid, tt)
    if g is not None:
        rate = rate + g
    return rate


def _atom_half_kick(atoms: PointConfiguration, rho: DensityField,
                    forcing: ForcingSpec | None, t: float, half_dt: float,
                    guard: float) -> PointConfiguration:
    """Midpoint step of the atoms against a frozen density."""
    pts = np.asarray(atoms.points)
    v0 = atom_velocities(atoms, rho if total_mass(rho) > 0 else None, forcing, t, guard)
    mid = PointConfiguration(pts + 0.5 * half_dt * v0, atoms.frame)
    v1 = atom_velocities(mid, rho if total_mass(rho) > 0 else None, forcing,
                         t + 0.5 * half_dt, guard)
    return PointConfiguration(pts + half_dt * v1, atoms.frame)


def hybrid_step(state: HybridState, forcing: ForcingSpec | None = None,
                params: SolverParams | None = None,
                flow: FlowParams | None = None, *,
                max_dt: float | None = None,
                step_index: int = 0) -> tuple[HybridState, float]:
    """One Strang-symmetrized step: half atoms, full density, half atoms.

    The shared step obeys the density CFL for the combined velocity field
    and keeps each atom's motion below a fraction of the pair separation.
    Without atoms this delegates to the plain solver step unchanged.
    """
    forcing = forcing or ForcingSpec()
    params = params or SolverParams()
    flow = flow or FlowParams()

    if not state.n_atoms:
        rho, dt = density_step(state.rho, forcing, state.t, params,
                               max_dt=max_dt, step_index=step_index)
        return HybridState(None, rho, state.t + dt), dt

    grid = state.rho.grid
    ax, ay = hybrid_velocity(state, forcing)
    dt = _stable_dt(grid, ax, ay, params)
    has_rho = total_mass(state.rho) > 0
    v_atoms = atom_velocities(state.atoms, state.rho if has_rho else None,
                              forcing, state.t, flow.min_separation_guard)
    vmax = float(np.abs(v_atoms).max())
    if vmax > 0:
        sep = state.atoms.min_separation()
        if np.isfinite(sep):
            dt = min(dt, params.cfl * 0.25 * sep / vmax)
        dt = min(dt, params.cfl * grid.h / vmax)
    if max_dt is not None:
        dt = min(dt, max_dt)

    atoms_half = _atom_half_kick(state.atoms, state.rho, forcing, state.t,
                                 0.5 * dt, flow.min_separation_guard)

    # full density step against the mid-position atoms (SSP-RK2 as in pde)
    mid = HybridState(atoms_half, state.rho, state.t)
    h = grid.h
    ax1, ay1 = hybrid_velocity(mid, forcing, state.t)
    g0 = forcing.g_on(grid, state.t)
    r1 = _flux_divergence(state.rho.values, ax1, ay1, h)
    if g0 is not None:
        r1 = r1 + g0
    rho1 = DensityField(grid, _accept(state.rho.values + dt * r1, state.t, step_index))
    mid1 = HybridState(atoms_half, rho1, state.t)
    ax2, ay2 = hybrid_velocity(mid1, forcing, state.t + dt)
    g1 = forcing.g_on(grid, state.t + dt)
    r2 = _flux_divergence(rho1.values, ax2, ay2, h)
    if g1 is not None:
        r2 = r2 + g1
    rho_new = DensityField(grid, _accept(
        0.5 * (state.rho.values + rho1.values + dt * r2), state.t, step_index))

    atoms_new = _atom_half_kick(atoms_half, rho_new, forcing, state.t + 0.5 * dt,
                                0.5 * dt, flow.min_separation_guard)
    return HybridState(atoms_new, rho_new, state.t + dt), dt


@dataclass
class HybridEvolveResult:
    """Trajectory of hybrid states plus diagnostics of the diffuse part."""

    states: list[HybridState]
    records: list[DiagnosticsRecord]
    halt_reason: str  # "end_time" | "rho_concentration"
    n_steps: int

    @property
    def final(self) -> HybridState:
        return self.states[-1]


def rho_mass_near_atoms(state: HybridState, radius: float) -> float:
    """Largest diffuse mass inside ``radius`` of any atom (0 without atoms)."""
    if not state.n_atoms:
        return 0.0
    m = local_mass_map(state.rho, radius)
    grid = state.rho.grid
    best = 0.0
    for q in state.atoms.points:
        i = int(np.clip(np.floor((q[0] + grid.L) / grid.h), 0, grid.n - 1))
        j = int(np.clip(np.floor((q[1] + grid.L) / grid.h), 0, grid.n - 1))
        best = max(best, float(m[i, j]))
    return best


def evolve_hybrid(state0: HybridState, forcing: ForcingSpec | None = None,
                  params: SolverParams | None = None,
                  flow: FlowParams | None = None,
                  thresholds: ConcentrationThresholds | None = None,
                  observers: Sequence = ()) -> HybridEvolveResult:
    """Run the coupled system until ``end_time``.

    Halts with ``"rho_concentration"`` when the diffuse density piles more
    than ``eps_star`` of mass within the detection radius of an atom: past
    that point the fixed-atom-count model is no longer meaningful.
    """
    params = params or SolverParams()
    state = state0
    states = [state]
    records: list[DiagnosticsRecord] = []
    halt = "end_time"
    n_steps = 0
    while state.t < params.end_time - 1e-15 * max(1.0, params.end_time):
        state, dt = hybrid_step(state, forcing, params, flow,
                                max_dt=params.end_time - state.t, step_index=n_steps)
        n_steps += 1
        if n_steps % params.snapshot_every == 0 or \
                state.t >= params.end_time - 1e-15 * max(1.0, params.end_time):
            states.append(state)
            for obs in observers:
                rec = obs(state.t, state.rho)
                if rec is not None:
                    records.append(rec)
            if thresholds is not None and state.n_atoms:
                if rho_mass_near_atoms(state, thresholds.detect_radius) >= thresholds.eps_star:
                    halt = "rho_concentration"
                    break
    return HybridEvolveResult(states, records, halt, n_steps)
