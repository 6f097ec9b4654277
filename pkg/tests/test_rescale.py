import math

import numpy as np
import pytest

from kslab import (
    ConcentrationThresholds,
    DensityField,
    Grid2D,
    bubble_profile,
    gaussian_profile,
    total_mass,
)
from kslab.profiles import sum_profiles
from kslab.rescale import (
    blow_down,
    blowup_rescale,
    from_self_similar,
    parabolic_rescale,
    rescaled_time,
    to_self_similar,
)


class TestParabolicRescale:
    def test_identity(self):
        g = Grid2D(6.0, 128)
        u = gaussian_profile(g, 3.0, 0.8, (0.4, -0.3))
        out = parabolic_rescale(u, 1.0)
        assert np.allclose(out.values, u.values, atol=1e-14)

    def test_rejects_bad_scale(self):
        g = Grid2D(6.0, 64)
        u = gaussian_profile(g, 1.0, 0.5)
        with pytest.raises(ValueError):
            parabolic_rescale(u, 0.0)

    @pytest.mark.parametrize("lam", [0.5, 2.0])
    def test_mass_preserved(self, lam):
        g = Grid2D(10.0, 256)
        u = gaussian_profile(g, 4.0, 0.6)
        out = parabolic_rescale(u, lam)
        assert total_mass(out) == pytest.approx(total_mass(u), rel=1e-3)

    def test_bubble_parameter_shift(self):
        # zooming the lam0 profile by lam gives the lam0/lam profile
        g = Grid2D(10.0, 256)
        lam0, lam = 0.8, 2.0
        out = parabolic_rescale(bubble_profile(g, lam0), lam)
        expect = bubble_profile(g, lam0 / lam)
        scale = expect.values.max()
        assert np.abs(out.values - expect.values).max() <= 2e-2 * scale

    def test_composition(self):
        g = Grid2D(8.0, 256)
        u = gaussian_profile(g, 2.0, 1.0)
        once = parabolic_rescale(parabolic_rescale(u, 1.5), 1.2)
        direct = parabolic_rescale(u, 1.8)
        assert np.abs(once.values - direct.values).max() <= 1e-2 * direct.values.max()

    def test_time_transform(self):
        assert rescaled_time(-0.5, 2.0) == -2.0


class TestSelfSimilar:
    def test_unit_slice_is_identity(self):
        g = Grid2D(6.0, 128)
        u = gaussian_profile(g, 3.0, 0.7)
        state = to_self_similar(u, -1.0)
        assert state.s == 0.0
        assert np.allclose(state.z.values, u.values, atol=1e-12)

    def test_rejects_forward_time(self):
        g = Grid2D(6.0, 64)
        u = gaussian_profile(g, 1.0, 0.5)
        with pytest.raises(ValueError):
            to_self_similar(u, 0.0)

    def test_mass_invariance(self):
        g = Grid2D(10.0, 256)
        u = gaussian_profile(g, 5.0, 0.5)
        st = to_self_similar(u, -0.25)
        assert total_mass(st.z) == pytest.approx(total_mass(u), rel=1e-3)

    def test_self_similar_profile_is_fixed(self):
        # u(x,t) = (-t)^{-1} gshape(x/sqrt(-t)) maps to z = gshape for all t
        g = Grid2D(10.0, 256)
        shape = gaussian_profile(g, 2.0, 0.6)
        for t in (-1.0, -0.5, -0.2):
            lam = math.sqrt(-t)
            X, Y = g.mesh()
            vals = np.stack([X / lam, Y / lam], axis=-1)
            phys = DensityField(g, (1.0 / -t) * 2.0 / (2 * math.pi * 0.6**2)
                                * np.exp(-((X / lam) ** 2 + (Y / lam) ** 2) / (2 * 0.6**2)))
            st = to_self_similar(phys, t)
            assert np.abs(st.z.values - shape.values).max() <= 3e-2 * shape.values.max()

    def test_round_trip(self):
        g = Grid2D(8.0, 256)
        u = gaussian_profile(g, 3.0, 0.5)
        st = to_self_similar(u, -0.5)
        back, t = from_self_similar(st)
        assert t == pytest.approx(-0.5)
        assert np.abs(back.values - u.values).max() <= 1e-2 * u.values.max()


class TestBlowupRescale:
    def test_peak_normalization_on_bubble(self):
        g = Grid2D(10.0, 512)
        lam = 0.25
        u = bubble_profile(g, lam)  # peak 8/lam^2
        window = blowup_rescale([0.0], [u], (0.0, 0.0), 0)
        # interpolated peak sits slightly below the analytic one
        assert window.scale == pytest.approx(math.sqrt(8.0) / lam, rel=2e-2)
        zoomed = window.center_slice
        assert zoomed.values.max() <= 1.0 + 1e-12
        # rescaled field matches the unit-height profile (width sqrt(8))
        expect = bubble_profile(g, math.sqrt(8.0))
        assert zoomed.values.max() == pytest.approx(expect.values.max(), rel=5e-3)
        assert np.abs(zoomed.values - expect.values).max() <= 5e-2

    def test_unit_peak_is_identity_window(self):
        # probe at the corner point (0,0) whose bilinear value is exactly the
        # mean of the four central cells; normalizing makes it exactly 1, and
        # zooming by 1 about it resamples exactly on cell centers
        g = Grid2D(10.0, 256)
        raw = gaussian_profile(g, 3.0, 1.0)
        corner_value = float(
            (raw.values[127:129, 127:129]).mean())
        u = DensityField(g, raw.values / corner_value)
        window = blowup_rescale([0.0, 0.1], [u, u], (0.0, 0.0), 0)
        assert window.scale == 1.0
        assert np.abs(window.center_slice.values - u.values).max() < 1e-12
        assert window.taus == pytest.approx((0.0, 0.1))

    def test_partial_window_flag(self):
        g = Grid2D(10.0, 256)
        u = bubble_profile(g, 1.0)
        window = blowup_rescale([0.0], [u], (0.0, 0.0), 0)
        assert window.partial  # a single slice cannot cover tau in [-1, 1]

    def test_rejects_vacuum_point(self):
        g = Grid2D(10.0, 128)
        u = DensityField(g, np.zeros((128, 128)))
        with pytest.raises(ValueError):
            blowup_rescale([0.0], [u], (0.0, 0.0), 0)


class TestBlowDown:
    def _synthetic_pair_trajectory(self, g, p, lam_bubble, times):
        fields = []
        for t in times:
            s = math.sqrt(-t)
            fields.append(sum_profiles(
                bubble_profile(g, lam_bubble, tuple(s * p)),
                bubble_profile(g, lam_bubble, tuple(-s * p)),
            ))
        return fields

    def test_static_bubble_fits_origin(self):
        g = Grid2D(8.0, 256)
        times = [-1.0, -0.5, -0.25]
        fields = [bubble_profile(g, 0.08) for _ in times]
        th = ConcentrationThresholds(detect_radius=0.3)
        fit = blow_down(times, fields, [1.0, 1.5], 1, th)
        assert np.abs(fit.p).max() < 0.05

    def test_synthetic_pair_recovers_antipodal_profile(self):
        g = Grid2D(8.0, 256)
        p = np.array([2.0, 0.0])
        times = [-1.0, -0.7, -0.5, -0.35]
        fields = self._synthetic_pair_trajectory(g, p, 0.06, times)
        th = ConcentrationThresholds(detect_radius=0.3)
        fit = blow_down(times, fields, [1.0], 2, th)
        got = fit.p[np.argsort(fit.p[:, 0])]
        assert np.allclose(got, [[-2.0, 0.0], [2.0, 0.0]], atol=0.1)
        assert fit.fit_error < 0.05

    def test_fit_error_shrinks_with_bubble_width(self):
        g = Grid2D(8.0, 256)
        p = np.array([1.5, 0.5])
        times = [-1.0, -0.6, -0.4]
        # widths must stay a few cells wide, else detection quantization floors
        th = ConcentrationThresholds(detect_radius=0.3)
        errs = []
        for lam_b in (0.2, 0.12):
            fields = []
            for t in times:
                s = math.sqrt(-t)
                fields.append(sum_profiles(
                    bubble_profile(g, lam_b, tuple(s * p)),
                    bubble_profile(g, lam_b, tuple(-s * p))))
            fit = blow_down(times, fields, [1.0], 2, th)
            errs.append(fit.fit_error)
        assert errs[1] < errs[0]

    def test_rejects_positive_times(self):
        g = Grid2D(8.0, 64)
        u = gaussian_profile(g, 1.0, 0.5)
        with pytest.raises(ValueError):
            blow_down([0.5], [u], [1.0], 1, ConcentrationThresholds(detect_radius=0.3))

    def test_json_report_shape(self):
        g = Grid2D(8.0, 128)
        times = [-1.0, -0.5]
        fields = [bubble_profile(g, 0.1) for _ in times]
        th = ConcentrationThresholds(detect_radius=0.4)
        fit = blow_down(times, fields, [1.0, 2.0], 1, th)
        d = fit.to_json_dict()
        assert set(d) == {"p", "fit_error", "per_lambda"}
        assert len(d["per_lambda"]) == 2
        assert set(d["per_lambda"][0]) == {"lambda", "p", "fit_error"}
