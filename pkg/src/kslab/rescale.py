"""Mass-invariant zoom, similarity variables, and limit-structure extraction.

The system is invariant under ``u -> lam^2 u(lam x, lam^2 t)``; in two
dimensions this preserves total mass, which is why concentration happens at
a quantized mass.  This module implements that zoom as a resampling, the
change to similarity variables ``y = x / sqrt(-t)``, the peak-normalized
rescaling that extracts entire-solution candidates, and the blow-down fit
that reads off the asymptotic atom configuration ``q_j(t) ~ sqrt(-t) p_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    ConcentrationThresholds,
    DensityField,
    FloatArray,
    SelfSimilarState,
    sample_field,
)
from .diagnostics import detect_atoms


def rescaled_time(t: float, lam: float) -> float:
    """Time coordinate matching the spatial zoom: ``t -> lam^2 t``."""
    return lam * lam * t


def parabolic_rescale(u: DensityField, lam: float, center=(0.0, 0.0)) -> DensityField:
    """Resample ``lam^2 u(center + lam x)`` onto the same grid.

    Bilinear in space; sample points outside the source box read as vacuum,
    consistent with the far-field model.  Mass is preserved up to
    interpolation and whatever truncation the zoom pushes off the grid.
    The caller's time coordinate transforms as :func:`rescaled_time`.
    """
    if not lam > 0:
        raise ValueError(f"scale factor must be positive, got {lam}")
    grid = u.grid
    X, Y = grid.mesh()
    pts = np.stack([center[0] + lam * X, center[1] + lam * Y], axis=-1)
    return DensityField(grid, lam * lam * sample_field(u, pts))


def to_self_similar(u: DensityField, t: float) -> SelfSimilarState:
    """Change to similarity variables at backward time ``t < 0``.

    ``z(y) = |t| u(sqrt(-t) y)`` on the same grid, ``s = -log(-t)``.
    """
    if not t < 0.0:
        raise ValueError(f"similarity variables need t < 0, got t={t}")
    lam = math.sqrt(-t)
    return SelfSimilarState(parabolic_rescale(u, lam), -math.log(-t))


def from_self_similar(state: SelfSimilarState) -> tuple[DensityField, float]:
    """Invert :func:`to_self_similar`: returns the physical field and time."""
    t = -math.exp(-state.s)
    lam = math.sqrt(-t)
    return parabolic_rescale(state.z, 1.0 / lam), t


@dataclass(frozen=True)
class BlowupWindow:
    """Peak-normalized rescaled window around a candidate singularity."""

    taus: tuple[float, ...]
    fields: tuple[DensityField, ...]
    scale: float          # R = sqrt(peak value)
    center_index: int
    partial: bool         # True when the data does not cover tau in [-1, 1]

    @property
    def center_slice(self) -> DensityField:
        return self.fields[self.center_index]


def blowup_rescale(times: Sequence[float], fields: Sequence[DensityField],
                   point, slice_index: int) -> BlowupWindow:
    """Zoom a trajectory so the chosen peak has unit height at time zero.

    With ``R^2`` the density at ``point`` on the chosen slice, emits
    ``R^{-2} u(point + x / R, t_i + tau / R^2)``; the candidate limit of such
    windows under refinement is an entire solution of the system.
    """
    if len(times) != len(fields) or not fields:
        raise ValueError("times and fields must be equally sized and nonempty")
    if not 0 <= slice_index < len(fields):
        raise ValueError(f"slice index {slice_index} out of range")
    u_i = fields[slice_index]
    t_i = times[slice_index]
    peak = float(sample_field(u_i, np.asarray(point, dtype=np.float64)))
    if not peak > 0.0:
        raise ValueError(f"density at {tuple(point)} is not positive (got {peak})")
    R = math.sqrt(peak)
    rescaled = [parabolic_rescale(u, 1.0 / R, point) for u in fields]
    taus = tuple((t - t_i) * R * R for t in times)
    partial = not (min(taus) <= -1.0 and max(taus) >= 1.0)
    return BlowupWindow(taus=taus, fields=tuple(rescaled), scale=R,
                        center_index=slice_index, partial=partial)


# ---------------------------------------------------------------------------
# Blow-down
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlowDownFit:
    """Atom sets over rescaled slices and the fitted asymptotic profile."""

    p: FloatArray                   # (N, 2) fitted self-similar positions
    fit_error: float                # rms of |q - sqrt(-tau) p| over samples
    per_lambda: tuple[dict, ...]    # one entry per zoom factor

    def to_json_dict(self) -> dict:
        return {
            "p": [[float(a), float(b)] for a, b in self.p],
            "fit_error": float(self.fit_error),
            "per_lambda": [
                {
                    "lambda": e["lambda"],
                    "p": [[float(a), float(b)] for a, b in e["p"]],
                    "fit_error": float(e["fit_error"]),
                }
                for e in self.per_lambda
            ],
        }


def _fit_self_similar(taus: Sequence[float], atom_sets: Sequence[FloatArray]):
    """Weighted least-squares fit of ``q(tau) = sqrt(-tau) p``.

    Weights ``sqrt(-tau)`` equalize the relative error across slices.  Atom
    correspondence is greedy nearest-neighbor in normalized coordinates.
    """
    ref = atom_sets[0] / math.sqrt(-taus[0])
    n = ref.shape[0]
    num = np.zeros((n, 2))
    den = np.zeros(n)
    samples: list[list[tuple[float, FloatArray]]] = [[] for _ in range(n)]
    for tau, atoms in zip(taus, atom_sets):
        sig = math.sqrt(-tau)
        norm = atoms / sig
        taken: set[int] = set()
        for j in range(n):
            d = ((norm - ref[j]) ** 2).sum(axis=1)
            order = np.argsort(d)
            pick = next(int(k) for k in order if int(k) not in taken)
            taken.add(pick)
            w = sig
            num[j] += w * sig * atoms[pick]
            den[j] += w * sig * sig
            samples[j].append((sig, atoms[pick]))
    p = num / den[:, None]
    sq = 0.0
    count = 0
    for j in range(n):
        for sig, q in samples[j]:
            sq += float(((q - sig * p[j]) ** 2).sum())
            count += 1
    return p, math.sqrt(sq / max(count, 1))


def blow_down(times: Sequence[float], fields: Sequence[DensityField],
              lambdas: Sequence[float], n_atoms: int,
              thresholds: ConcentrationThresholds) -> BlowDownFit:
    """Fit the large-scale atom structure of a backward-time trajectory.

    Every time in ``times`` must be negative (the reference singular time is
    zero).  For each zoom factor the trajectory is rescaled, atoms are
    detected per slice, and the self-similar law is fitted per zoom and
    pooled over all of them.
    """
    times = list(times)
    if not times or len(times) != len(fields):
        raise ValueError("times and fields must be equally sized and nonempty")
    if not all(t < 0 for t in times):
        raise ValueError("blow-down requires negative (backward) times")
    if not all(lam > 0 for lam in lambdas):
        raise ValueError("zoom factors must be positive")

    per_lambda = []
    all_taus: list[float] = []
    all_atoms: list[FloatArray] = []
    for lam in lambdas:
        taus = []
        atom_sets = []
        for t, u in zip(times, fields):
            zoomed = parabolic_rescale(u, lam)
            det = detect_atoms(zoomed, thresholds, n_atoms)
            taus.append(t / (lam * lam))
            atom_sets.append(np.asarray(det.atoms.points))
        p_lam, err_lam = _fit_self_similar(taus, atom_sets)
        per_lambda.append({"lambda": float(lam), "p": p_lam, "fit_error": err_lam})
        all_taus.extend(taus)
        all_atoms.extend(atom_sets)
    p, err = _fit_self_similar(all_taus, all_atoms)
    return BlowDownFit(p=p, fit_error=err, per_lambda=tuple(per_lambda))
