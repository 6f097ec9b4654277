import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kslab import (
    ConcentrationThresholds,
    DensityField,
    Grid2D,
    HybridState,
    PointConfiguration,
    bubble_profile,
    gaussian_profile,
    make_cutoff,
    total_mass,
)
from kslab.diagnostics import (
    WindowWeight,
    compute_record,
    detect_atoms,
    entropy,
    free_energy,
    localized_second_moment_rate,
    max_local_mass,
    ndjson_line,
    second_moment_rate,
    symmetrized_kernel,
    weighted_mass_rate,
    weighted_moment,
)
from kslab.profiles import sum_profiles

ATOM = 8.0 * math.pi
EULER_GAMMA = 0.5772156649015329


def gaussian_free_energy(m: float, sigma: float) -> float:
    # closed form: entropy of the Gaussian plus the log-interaction of two
    # independent Gaussians (|X-Y| ~ Rayleigh)
    return (m * (math.log(m / (2 * math.pi * sigma**2)) - 1.0)
            + m**2 / (8 * math.pi) * (2 * math.log(2 * sigma) - EULER_GAMMA))


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

class TestWeightedMoment:
    def test_zero_field(self):
        g = Grid2D(4.0, 64)
        u = DensityField(g, np.zeros((64, 64)))
        psi = make_cutoff((0, 0), 1.0, 2.0)
        assert weighted_moment(u, psi, 0) == 0.0
        assert np.all(weighted_moment(u, psi, 1) == 0.0)
        assert weighted_moment(u, psi, 2) == 0.0

    def test_unit_bump_inside_plateau(self):
        g = Grid2D(4.0, 256)
        u = gaussian_profile(g, 1.0, 0.15, (0.2, -0.1))
        psi = make_cutoff((0, 0), 1.5, 2.5)
        assert weighted_moment(u, psi, 0) == pytest.approx(1.0, abs=1e-8)

    def test_narrow_bump_first_moment(self):
        g = Grid2D(4.0, 256)
        y0 = np.array([0.6, -0.4])
        m = 2.5
        u = gaussian_profile(g, m, 0.05, y0)
        psi = make_cutoff((0, 0), 2.0, 3.0)
        m1 = weighted_moment(u, psi, 1)
        assert np.allclose(m1, m * y0, atol=m * 0.05**2 * 10)


# ---------------------------------------------------------------------------
# Symmetrized kernel
# ---------------------------------------------------------------------------

class _Quadratic:
    """Test function |x - c|^2 with analytic derivatives."""

    def __init__(self, c):
        self.center = np.asarray(c, dtype=np.float64)

    def value(self, p):
        rel = np.asarray(p) - self.center
        return (rel**2).sum(axis=-1)

    def gradient(self, p):
        return 2.0 * (np.asarray(p, dtype=np.float64) - self.center)

    def laplacian(self, p):
        return np.full(np.asarray(p).shape[:-1], 4.0)


class TestSymmetrizedKernel:
    def test_constant_gradient_region_vanishes(self):
        psi = make_cutoff((0, 0), 1.0, 2.0)
        # both points in the plateau: gradients vanish identically
        assert symmetrized_kernel(psi, (0.3, 0.1), (-0.2, 0.4)) == 0.0

    def test_quadratic_gives_two(self):
        quad = _Quadratic((0.2, -0.7))
        rng = np.random.default_rng(3)
        for _ in range(10):
            x, y = rng.normal(size=2), rng.normal(size=2)
            assert symmetrized_kernel(quad, x, y) == pytest.approx(2.0, rel=1e-12)

    def test_diagonal_is_zero(self):
        psi = make_cutoff((0, 0), 1.0, 2.0)
        assert symmetrized_kernel(psi, (1.5, 0.0), (1.5, 0.0)) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    def test_symmetry_and_bound(self, x0, x1, y0, y1):
        psi = make_cutoff((0, 0), 1.0, 2.0)
        a = symmetrized_kernel(psi, (x0, x1), (y0, y1))
        b = symmetrized_kernel(psi, (y0, y1), (x0, x1))
        assert a == b
        # Hessian bound of the quintic radial profile
        width = 1.0
        bound = 60.0 / (3 * math.sqrt(3.0)) / width**2 + 1.875 / (width * 1.0)
        assert abs(a) <= bound + 1e-9


# ---------------------------------------------------------------------------
# Weighted-mass rate
# ---------------------------------------------------------------------------

class TestWeightedMassRate:
    def test_zero_field(self):
        g = Grid2D(4.0, 64)
        u = DensityField(g, np.zeros((64, 64)))
        psi = make_cutoff((0, 0), 1.0, 2.0)
        assert weighted_mass_rate(u, psi) == 0.0

    def test_mass_conservation_when_psi_covers_support(self):
        g = Grid2D(8.0, 128)
        u = gaussian_profile(g, 4.0, 0.4)
        psi = make_cutoff((0, 0), 4.0, 6.0)
        # support of u is numerically inside the plateau: rate must vanish
        assert abs(weighted_mass_rate(u, psi)) < 1e-10


# ---------------------------------------------------------------------------
# Second-moment rates
# ---------------------------------------------------------------------------

class TestSecondMomentRate:
    def test_values(self):
        assert second_moment_rate(0.0) == 0.0
        assert second_moment_rate(8 * math.pi) == pytest.approx(0.0, abs=1e-12)
        assert second_moment_rate(12 * math.pi) == pytest.approx(-24 * math.pi)
        assert second_moment_rate(4 * math.pi) == pytest.approx(8 * math.pi)

    def test_rejects_negative_mass(self):
        with pytest.raises(ValueError):
            second_moment_rate(-1.0)


class TestLocalizedRate:
    def _empty(self, g):
        return DensityField(g, np.zeros((g.n, g.n)))

    def test_zero_measure(self):
        g = Grid2D(4.0, 64)
        w = make_cutoff((0, 0), 1.0, 2.0)
        assert localized_second_moment_rate(self._empty(g), w) == 0.0

    def test_single_atom_quantization(self):
        # one atom of the quantized mass in the plateau: rate exactly 0
        g = Grid2D(4.0, 64)
        atoms = PointConfiguration(np.array([[0.0, 0.0]]))
        state = HybridState(atoms, self._empty(g))
        w = make_cutoff((0, 0), 1.0, 2.0)
        assert localized_second_moment_rate(state, w) == pytest.approx(0.0, abs=1e-12)

    def test_atoms_reduce_to_mass_law(self):
        g = Grid2D(4.0, 64)
        atoms = PointConfiguration(np.array([[0.3, 0.0], [-0.3, 0.1], [0.0, -0.25]]))
        state = HybridState(atoms, self._empty(g))
        w = make_cutoff((0, 0), 1.0, 2.0)
        m = 3 * ATOM
        assert localized_second_moment_rate(state, w) == pytest.approx(
            second_moment_rate(m), rel=1e-12)

    def test_matches_generic_identity_for_smooth_density(self):
        # continuum check: the localized rate equals the weighted-mass rate of
        # |x - c|^2 psi2 up to the discrete cell self-interaction O(h^2)
        g = Grid2D(6.0, 96)
        u = gaussian_profile(g, 7.0, 0.8, (0.3, 0.2))
        w = make_cutoff((0.1, 0.0), 2.0, 3.5)
        lhs = localized_second_moment_rate(u, w)
        rhs_ = weighted_mass_rate(u, WindowWeight(w))
        self_term = float(((u.values * w.value(np.stack(g.mesh(), axis=-1)))**2).sum()
                          * g.cell_area**2) / (2 * math.pi)
        assert lhs == pytest.approx(rhs_ - self_term, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# Free energy and entropy
# ---------------------------------------------------------------------------

class TestEntropy:
    def test_zero(self):
        g = Grid2D(2.0, 16)
        assert entropy(DensityField(g, np.zeros((16, 16)))) == 0.0

    def test_uniform_one_is_zero(self):
        g = Grid2D(2.0, 64)
        v = np.zeros((64, 64))
        v[10:20, 30:40] = 1.0
        assert entropy(DensityField(g, v)) == 0.0

    def test_uniform_e(self):
        g = Grid2D(2.0, 64)
        v = np.zeros((64, 64))
        v[10:20, 30:40] = math.e
        area = 100 * g.cell_area
        assert entropy(DensityField(g, v)) == pytest.approx(math.e * area, rel=1e-12)


class TestFreeEnergy:
    def test_zero_field(self):
        g = Grid2D(2.0, 16)
        assert free_energy(DensityField(g, np.zeros((16, 16)))) == 0.0

    def test_bubble_closed_form(self):
        g = Grid2D(40.0, 512)
        f = free_energy(bubble_profile(g, 1.0))
        assert f == pytest.approx(8 * math.pi * (math.log(8.0) - 1.0), rel=1e-3)

    def test_gaussian_closed_form(self):
        g = Grid2D(12.0, 256)
        m, sigma = 4 * math.pi, 1.0
        f = free_energy(gaussian_profile(g, m, sigma))
        assert f == pytest.approx(gaussian_free_energy(m, sigma), rel=2e-3, abs=2e-3)

    def test_critical_scale_invariance(self):
        # at the quantized mass the energy is scale-free; the subcritical
        # Gaussian shifts by m (2 - m/(4 pi)) log(lambda)
        g = Grid2D(60.0, 1024)
        base = free_energy(bubble_profile(g, 1.0))
        for lam in (0.5, 2.0):
            shifted = free_energy(bubble_profile(g, 1.0 / lam))
            gauss_shift = 4 * math.pi * math.log(lam)
            assert abs(shifted - base) <= 0.02 * abs(gauss_shift)


# ---------------------------------------------------------------------------
# Local mass and detection
# ---------------------------------------------------------------------------

class TestLocalMass:
    def test_zero_field(self):
        g = Grid2D(2.0, 32)
        val, _ = max_local_mass(DensityField(g, np.zeros((32, 32))), 0.3)
        assert val == 0.0

    def test_contained_bump(self):
        g = Grid2D(4.0, 128)
        u = gaussian_profile(g, 3.0, 0.05, (0.7, -0.5))
        val, loc = max_local_mass(u, 0.4)
        assert val == pytest.approx(3.0, rel=1e-3)
        assert np.allclose(loc, [0.7, -0.5], atol=2 * g.h)

    def test_two_bumps_picks_heavier(self):
        g = Grid2D(4.0, 128)
        u = sum_profiles(gaussian_profile(g, 3.0, 0.05, (1.0, 0.0)),
                         gaussian_profile(g, 1.0, 0.05, (-1.0, 0.0)))
        val, loc = max_local_mass(u, 0.3)
        assert val == pytest.approx(3.0, rel=1e-2)
        assert np.allclose(loc, [1.0, 0.0], atol=2 * g.h)

    def test_monotone_in_radius(self):
        g = Grid2D(4.0, 64)
        u = gaussian_profile(g, 2.0, 0.5, (0.3, 0.3))
        vals = [max_local_mass(u, r)[0] for r in (0.2, 0.4, 0.8, 1.6)]
        assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))

    def test_never_exceeds_total(self):
        g = Grid2D(4.0, 64)
        u = gaussian_profile(g, 2.0, 0.1)
        val, _ = max_local_mass(u, 1.5)
        assert val <= total_mass(u)


class TestDetectAtoms:
    def test_single_sharp_bubble(self):
        g = Grid2D(2.0, 256)
        u = bubble_profile(g, 0.05, (0.3, -0.2))
        th = ConcentrationThresholds.for_grid(g)
        res = detect_atoms(u, th, 1)
        assert np.allclose(res.atoms.points[0], [0.3, -0.2], atol=0.05)
        assert res.genuine

    def test_two_sharp_bubbles(self):
        g = Grid2D(2.0, 256)
        u = sum_profiles(bubble_profile(g, 0.05, (0.5, 0.0)),
                         bubble_profile(g, 0.05, (-0.5, 0.0)))
        th = ConcentrationThresholds(detect_radius=0.25)
        res = detect_atoms(u, th, 2)
        got = res.atoms.points[np.argsort(res.atoms.points[:, 0])]
        assert np.allclose(got, [[-0.5, 0.0], [0.5, 0.0]], atol=0.05)
        assert res.residual_mass < 0.05 * res.total_mass

    def test_broad_gaussian_is_not_an_atom(self):
        g = Grid2D(8.0, 128)
        u = gaussian_profile(g, 4 * math.pi, 2.0)
        th = ConcentrationThresholds.for_grid(g)
        res = detect_atoms(u, th, 1)
        assert res.residual_mass > 0.5 * res.total_mass
        assert not res.genuine

    def test_translation_equivariance(self):
        g = Grid2D(2.0, 128)
        h = g.h
        th = ConcentrationThresholds.for_grid(g)
        a = detect_atoms(bubble_profile(g, 0.05, (0.3, -0.2)), th, 1).atoms.points[0]
        b = detect_atoms(bubble_profile(g, 0.05, (0.3 + 4 * h, -0.2 + 8 * h)),
                         th, 1).atoms.points[0]
        assert np.allclose(b - a, [4 * h, 8 * h], atol=1e-8)

    def test_rejects_bad_count(self):
        g = Grid2D(2.0, 32)
        u = bubble_profile(g, 0.1)
        with pytest.raises(ValueError):
            detect_atoms(u, ConcentrationThresholds.for_grid(g), 0)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

class TestRecords:
    def test_record_fields_and_flag(self):
        g = Grid2D(4.0, 128)
        u = gaussian_profile(g, 2.0, 0.5)
        th = ConcentrationThresholds.for_grid(g)
        rec = compute_record(u, 0.25, th)
        assert rec.t == 0.25
        assert rec.mass == pytest.approx(2.0, rel=1e-6)
        assert rec.local_mass_sup <= rec.mass
        assert not rec.concentration_flag

    def test_flag_fires_on_concentrated_state(self):
        g = Grid2D(4.0, 256)
        u = bubble_profile(g, 0.05)
        th = ConcentrationThresholds.for_grid(g)
        rec = compute_record(u, 0.0, th)
        assert rec.concentration_flag

    def test_ndjson_line_schema(self):
        import json

        g = Grid2D(4.0, 64)
        u = gaussian_profile(g, 2.0, 0.5)
        th = ConcentrationThresholds.for_grid(g)
        line = ndjson_line(compute_record(u, 0.0, th))
        payload = json.loads(line)
        assert list(payload) == ["t", "mass", "m1", "m2", "F", "entropy",
                                 "max_u", "local_mass_sup", "concentration"]
        assert "\n" not in line
