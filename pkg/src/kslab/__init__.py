"""Numerical laboratory for aggregation-driven concentration in 2D chemotaxis.

The package couples a conservative finite-volume solver for the
parabolic-elliptic chemotaxis system on a large vacuum-bounded box with the
singular-limit point dynamics of concentration atoms, plus the rescaling and
diagnostic machinery (moment identities, free energy, concentration
detection) needed to study the approach to blow-up.
"""

from .core import (
    ATOM_MASS,
    ConcentrationThresholds,
    CutoffFunction,
    DensityField,
    ForcingSpec,
    Grid2D,
    HybridState,
    PointConfiguration,
    SelfSimilarState,
    VectorField,
    boundary_mass_fraction,
    make_cutoff,
    read_points,
    read_snapshot,
    total_mass,
    write_points,
    write_snapshot,
)
from .errors import (
    CollisionError,
    DataError,
    DetectionFailureError,
    NumericalFailureError,
    SearchFailureError,
)
from .profiles import bubble_profile, gaussian_profile, ring_profile

__all__ = [
    "ATOM_MASS",
    "ConcentrationThresholds",
    "CutoffFunction",
    "DensityField",
    "ForcingSpec",
    "Grid2D",
    "HybridState",
    "PointConfiguration",
    "SelfSimilarState",
    "VectorField",
    "boundary_mass_fraction",
    "make_cutoff",
    "read_points",
    "read_snapshot",
    "total_mass",
    "write_points",
    "write_snapshot",
    "CollisionError",
    "DataError",
    "DetectionFailureError",
    "NumericalFailureError",
    "SearchFailureError",
    "bubble_profile",
    "gaussian_profile",
    "ring_profile",
]

__version__ = "0.1.0"
