"""Critical configurations of the renormalized energy.

Static points of the renormalized flow balance the outward drift p/2
against pairwise attraction.  Regular polygons at circumradius 2*sqrt(N-1)
are always static; the search finds them (or other critical sets) from
random seeds and verifies the residual and total moment 4N(N-1).
"""

import math

import numpy as np

from kslab import PointConfiguration
from kslab.core import FRAME_RENORMALIZED
from kslab.pointdyn import (
    find_critical_point,
    flow_energy,
    point_velocities,
    renormalized_energy,
)

rng = np.random.default_rng(0)
for n in range(1, 6):
    seed = PointConfiguration(rng.normal(scale=1.5, size=(n, 2)), FRAME_RENORMALIZED)
    crit = find_critical_point(seed)
    radii = np.hypot(crit.points[:, 0], crit.points[:, 1])
    resid = float(np.abs(point_velocities(crit)).max())
    moment = float((crit.points**2).sum())
    print(f"N = {n}:")
    print(f"  radii        {np.array2string(np.sort(radii), precision=6)}"
          f"   (N-gon value 2*sqrt(N-1) = {2 * math.sqrt(max(n - 1, 0)):.6f})")
    print(f"  sum |p|^2    {moment:.10f}   (exact 4N(N-1) = {4 * n * (n - 1)})")
    print(f"  residual     {resid:.2e}")
    if n > 1:
        print(f"  energies     flow {flow_energy(crit):+.6f}, "
              f"ordered-pair form {renormalized_energy(crit):+.6f}")
