import math

import numpy as np
import pytest

from kslab import CollisionError, Grid2D, PointConfiguration, SearchFailureError, gaussian_profile
from kslab.core import FRAME_PHYSICAL, FRAME_RENORMALIZED
from kslab.pointdyn import (
    FlowParams,
    atom_velocities,
    find_critical_point,
    flow_energy,
    flow_energy_gradient,
    integrate_flow,
    pair_energy,
    point_velocities,
    renormalized_energy,
    renormalized_energy_gradient,
    to_renormalized,
    write_trajectory_csv,
)


def q_config(pts):
    return PointConfiguration(np.asarray(pts, dtype=float), FRAME_PHYSICAL)


def p_config(pts):
    return PointConfiguration(np.asarray(pts, dtype=float), FRAME_RENORMALIZED)


# ---------------------------------------------------------------------------
# Velocity laws
# ---------------------------------------------------------------------------

class TestVelocities:
    def test_single_point_is_static(self):
        assert np.all(point_velocities(q_config([[0.3, -0.8]])) == 0.0)

    def test_symmetric_pair(self):
        v = point_velocities(q_config([[1.0, 0.0], [-1.0, 0.0]]))
        assert np.allclose(v, [[-2.0, 0.0], [2.0, 0.0]])

    def test_equilateral_triangle_points_at_centroid(self):
        r = 0.9
        ang = 2 * math.pi * np.arange(3) / 3 + 0.31
        pts = r * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        v = point_velocities(q_config(pts))
        speeds = np.hypot(v[:, 0], v[:, 1])
        assert np.allclose(speeds, 4.0 / r, rtol=1e-12)
        # velocity is antiparallel to the position (toward the centroid)
        inner = (v * pts).sum(axis=1)
        assert np.all(inner < 0)
        assert np.allclose(np.abs(inner), speeds * r, rtol=1e-12)

    def test_renormalized_static_pair(self):
        assert np.allclose(point_velocities(p_config([[2.0, 0.0], [-2.0, 0.0]])), 0.0)

    def test_renormalized_origin_single(self):
        assert np.all(point_velocities(p_config([[0.0, 0.0]])) == 0.0)

    def test_renormalized_pair_inside_critical_radius(self):
        v = point_velocities(p_config([[1.0, 0.0], [-1.0, 0.0]]))
        assert np.allclose(v, [[-1.5, 0.0], [1.5, 0.0]])

    def test_collision_guard(self):
        cfg = q_config([[0.0, 0.0], [1e-9, 0.0]])
        with pytest.raises(CollisionError) as info:
            point_velocities(cfg, guard=1e-6)
        assert info.value.pair == (0, 1)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(5, 2))
        th = 0.77
        R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        v = point_velocities(p_config(pts))
        v_rot = point_velocities(p_config(pts @ R.T))
        assert np.allclose(v_rot, v @ R.T, rtol=1e-13, atol=1e-13)


class TestAtomVelocities:
    def test_reduces_to_pairwise_without_background(self):
        cfg = q_config([[0.6, 0.1], [-0.4, -0.2]])
        assert np.array_equal(atom_velocities(cfg), point_velocities(cfg))

    def test_radial_background_is_neutral(self):
        g = Grid2D(4.0, 128)
        c = g.centers()
        center = (c[70], c[60])
        rho = gaussian_profile(g, 3.0, 0.4, center)
        cfg = q_config([center])
        v = atom_velocities(cfg, rho)
        assert np.hypot(*v[0]) < 1e-12

    def test_far_bump_pull(self):
        g = Grid2D(8.0, 256)
        d, m_rho = 3.0, 2.0
        rho = gaussian_profile(g, m_rho, 0.2, (d, 0.0))
        v = atom_velocities(q_config([[0.0, 0.0]]), rho)
        assert v[0, 0] == pytest.approx(m_rho / (2 * math.pi * d), rel=0.01)
        assert abs(v[0, 1]) < 1e-12


# ---------------------------------------------------------------------------
# Energies
# ---------------------------------------------------------------------------

class TestEnergies:
    def test_single_point(self):
        assert pair_energy(q_config([[1.0, 2.0]])) == 0.0
        cfg = p_config([[0.0, 0.0]])
        assert renormalized_energy(cfg) == 0.0
        assert np.all(renormalized_energy_gradient(cfg) == 0.0)

    def test_pair_energy_values(self):
        assert pair_energy(q_config([[0.5, 0.0], [-0.5, 0.0]])) == 0.0  # log 1
        e = math.e
        assert pair_energy(q_config([[e / 2, 0.0], [-e / 2, 0.0]])) == pytest.approx(8.0)

    def test_renormalized_energy_value(self):
        cfg = p_config([[2.0, 0.0], [-2.0, 0.0]])
        assert renormalized_energy(cfg) == pytest.approx(-2.0 + 8.0 * math.log(4.0))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(scale=2.0, size=(4, 2))
        cfg = p_config(pts)
        grad = renormalized_energy_gradient(cfg)
        eps = 1e-6
        fd = np.zeros_like(pts)
        for j in range(4):
            for d in range(2):
                pp, pm = pts.copy(), pts.copy()
                pp[j, d] += eps
                pm[j, d] -= eps
                fd[j, d] = (renormalized_energy(p_config(pp))
                            - renormalized_energy(p_config(pm))) / (2 * eps)
        assert np.abs(grad - fd).max() / np.abs(fd).max() < 1e-6

    def test_flow_is_negative_gradient_of_flow_energy(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(scale=2.0, size=(5, 2))
        cfg = p_config(pts)
        assert np.allclose(point_velocities(cfg), -flow_energy_gradient(cfg),
                           rtol=0, atol=1e-14)

    def test_coincident_points_rejected_at_construction(self):
        with pytest.raises(ValueError):
            PointConfiguration(np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# Integration
# ---------------------------------------------------------------------------

class TestIntegration:
    def test_pair_collapse_matches_closed_form(self):
        a = 1.3
        params = FlowParams(rel_tol=1e-12, abs_tol=1e-14)
        traj = integrate_flow(q_config([[a, 0.0], [-a, 0.0]]), params, duration=1.0)
        r2 = (traj.points[:, 0, :] ** 2).sum(axis=-1)
        assert np.abs(r2 - (a * a - 4 * traj.times)).max() < 1e-8
        assert traj.collapse_time == pytest.approx(a * a / 4, rel=1e-6)
        assert traj.collision_pair == (0, 1)

    def test_center_of_mass_is_conserved(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(scale=1.0, size=(4, 2))
        pts -= pts.mean(axis=0) - [0.3, -0.2]
        traj = integrate_flow(q_config(pts), FlowParams(rel_tol=1e-12, abs_tol=1e-14),
                              duration=0.05)
        com = traj.points.mean(axis=1)
        drift = np.abs(com - com[0]).max()
        assert drift <= 1e-12 * max(1.0, traj.times[-1] - traj.times[0]) * 4

    def test_total_second_moment_rate(self):
        a = 1.1
        traj = integrate_flow(q_config([[a, 0.0], [-a, 0.0], [0.0, 2.0]]),
                              FlowParams(rel_tol=1e-12, abs_tol=1e-14), duration=0.2)
        tot = (traj.points**2).sum(axis=(1, 2))
        i0, i1 = 1, len(traj.times) // 2
        slope = (tot[i1] - tot[i0]) / (traj.times[i1] - traj.times[i0])
        n = 3
        assert slope == pytest.approx(-4.0 * n * (n - 1), abs=1e-6)

    def test_stationary_single_point(self):
        traj = integrate_flow(p_config([[0.0, 0.0]]), duration=5.0)
        assert np.all(traj.points == 0.0)
        assert traj.collapse_time is None

    def test_renormalized_pair_exact_law(self):
        # radial law r(s)^2 = 4 + (r0^2 - 4) e^s; from r0=1 the pair collides
        # at s = log(4/3), from r0=2 it is static
        params = FlowParams(rel_tol=1e-12, abs_tol=1e-14)
        traj = integrate_flow(p_config([[1.0, 0.0], [-1.0, 0.0]]), params, duration=2.0)
        r2 = (traj.points[:, 0, :] ** 2).sum(axis=-1)
        assert np.abs(r2 - (4.0 - 3.0 * np.exp(traj.times))).max() < 1e-8
        assert traj.collapse_time == pytest.approx(math.log(4.0 / 3.0), rel=1e-6)

        static = integrate_flow(p_config([[2.0, 0.0], [-2.0, 0.0]]), params, duration=3.0)
        assert np.abs(static.points - static.points[0]).max() < 1e-9

    def test_flow_energy_monotone_on_renormalized_flow(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(scale=1.8, size=(4, 2))
        traj = integrate_flow(p_config(pts), FlowParams(), duration=0.8)
        assert traj.flow_monotone
        diffs = np.diff(traj.flow_energies)
        assert np.all(diffs <= 1e-10 * (1.0 + np.abs(traj.flow_energies[:-1])))

    def test_frame_transform_consistency(self):
        # map a physical trajectory into similarity variables and check the
        # renormalized law holds along it
        a = 1.0
        params = FlowParams(rel_tol=1e-12, abs_tol=1e-14)
        traj = integrate_flow(q_config([[a, 0.0], [-a, 0.0]]), params, duration=1.0)
        tc = traj.collapse_time
        sel = traj.times < tc - 1e-3
        ss, ps = [], []
        for t, pts in zip(traj.times[sel], traj.points[sel]):
            p, s = to_renormalized(pts, t, tc)
            ss.append(s)
            ps.append(p)
        ss = np.array(ss)
        ps = np.array(ps)
        # compare dp/ds against the renormalized velocity at midpoints
        for k in range(0, len(ss) - 1, 7):
            ds = ss[k + 1] - ss[k]
            if ds < 1e-8:
                continue
            mid = 0.5 * (ps[k + 1] + ps[k])
            v = point_velocities(PointConfiguration(mid, FRAME_RENORMALIZED))
            fd = (ps[k + 1] - ps[k]) / ds
            assert np.abs(fd - v).max() < 5e-4 * (1 + np.abs(v).max())

    def test_trajectory_csv_round_trip_format(self, tmp_path):
        traj = integrate_flow(q_config([[1.0, 0.0], [-1.0, 0.0]]),
                              FlowParams(), duration=0.05)
        path = tmp_path / "traj.csv"
        write_trajectory_csv(path, traj)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# frame=physical-q")
        assert lines[1] == "s_or_t,j,x,y,W,calW"
        assert len(lines) == 2 + 2 * len(traj.times)


# ---------------------------------------------------------------------------
# Critical points
# ---------------------------------------------------------------------------

class TestCriticalPoints:
    def test_single_point_goes_to_origin(self):
        crit = find_critical_point(p_config([[0.7, -0.3]]))
        assert np.hypot(*crit.points[0]) < 1e-10

    def test_pair_radius_two(self):
        crit = find_critical_point(p_config([[1.0, 0.2], [-0.8, -0.1]]))
        radii = np.hypot(crit.points[:, 0], crit.points[:, 1])
        assert np.allclose(radii, 2.0, atol=1e-8)
        assert np.allclose(crit.points[0], -crit.points[1], atol=1e-8)

    def test_triangle_circumradius(self):
        rng = np.random.default_rng(4)
        crit = find_critical_point(p_config(rng.normal(scale=1.2, size=(3, 2))))
        radii = np.hypot(crit.points[:, 0], crit.points[:, 1])
        assert np.allclose(radii, 2.0 * math.sqrt(2.0), atol=1e-8)

    def test_static_iff_flow_gradient_vanishes(self):
        crit = find_critical_point(p_config([[1.1, 0.0], [-0.9, 0.3]]))
        assert np.abs(point_velocities(crit)).max() < 1e-11
        assert np.abs(flow_energy_gradient(crit)).max() < 1e-11

    def test_found_points_have_centered_mass_and_moment(self):
        for n in (2, 3, 4):
            rng = np.random.default_rng(n)
            crit = find_critical_point(p_config(rng.normal(scale=1.5, size=(n, 2))))
            assert np.abs(crit.points.sum(axis=0)).max() < 1e-9
            assert (crit.points**2).sum() == pytest.approx(4.0 * n * (n - 1), rel=1e-9)
