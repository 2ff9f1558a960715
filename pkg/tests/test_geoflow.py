"""Tests for the unit tangent flow and correlation decay measurement."""

import csv
import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from hyperwave.errors import CapExceeded
from hyperwave.fuchsian import (
    SurfacePoint,
    bolza_group,
    cyclic_cover,
    dirichlet_domain_membership,
    sample_domain,
    trivial_cover,
)
from hyperwave.geometry import HPoint, Moebius, UnitTangent, frame_of, tangent_of
from hyperwave.geoflow import (
    FlowState,
    MixingParams,
    ball_indicator,
    beta,
    bump_observable,
    correlation,
    correlation_curve,
    ensemble_positions,
    fit_decay_rate,
    flow,
    flow_ensemble,
    liouville_states,
    write_decay_csv,
)

CENTER = SurfacePoint(HPoint(0.0, 1.0), 0)


@pytest.fixture(scope="module")
def base():
    return bolza_group()


@pytest.fixture(scope="module")
def cover1(base):
    return trivial_cover(base)


@pytest.fixture(scope="module")
def cover2(base):
    return cyclic_cover(base, 2)


class TestBeta:
    def test_above_threshold(self):
        assert beta(0.5) == 1.0
        assert beta(3.84) == 1.0

    def test_at_zero(self):
        assert beta(0.0) == 0.0

    def test_interior_value(self):
        # 1 - sqrt(1 - 3/4) = 1/2
        assert beta(3.0 / 16.0) == pytest.approx(0.5, rel=1e-14)

    def test_continuous_at_threshold(self):
        assert beta(0.25) == 1.0
        assert beta(0.25 - 1e-12) == pytest.approx(1.0, abs=1e-5)

    def test_monotone_below_threshold(self):
        lams = np.linspace(0.0, 0.25, 50)
        vals = [beta(l) for l in lams]
        assert all(b2 > b1 for b1, b2 in zip(vals, vals[1:]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            beta(-0.1)


class TestMixingParams:
    def test_envelope_formula(self):
        params = MixingParams(3.84, times=(1, 2, 3))
        assert params.beta == 1.0
        assert params.prefactor == pytest.approx(11.0 * math.e, rel=1e-14)
        t = 2.0
        want = 11.0 * math.e * (1.0 + t) * math.exp(-t)
        assert params.bound(t) == pytest.approx(want, rel=1e-14)
        assert params.times == (1.0, 2.0, 3.0)

    def test_below_threshold_rate(self):
        params = MixingParams(3.0 / 16.0)
        assert params.beta == pytest.approx(0.5, rel=1e-14)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            MixingParams(0.0)
        with pytest.raises(ValueError):
            MixingParams(-1.0)


class TestFlow:
    def test_zero_time_is_identity(self, cover1):
        state = FlowState(frame_of(UnitTangent(HPoint(0.3, 1.4), 1.1)), 0)
        out = flow(state, 0.0, cover1)
        t_in, t_out = tangent_of(state.frame), tangent_of(out.frame)
        assert abs(t_out.point.z - t_in.point.z) < 1e-12
        assert abs(t_out.angle - t_in.angle) < 1e-12
        assert out.sheet == 0

    def test_vertical_geodesic(self, cover1):
        """Flowing the upward vector at i by t < systole/2 climbs to e^t i."""
        out = flow(FlowState(Moebius.identity(), 0), 0.9, cover1)
        tang = tangent_of(out.frame)
        assert abs(tang.point.x) < 1e-9
        assert tang.point.y == pytest.approx(math.exp(0.9), abs=1e-9)
        assert tang.angle == pytest.approx(0.5 * math.pi, abs=1e-9)

    def test_step_cap(self, cover1):
        state = FlowState(Moebius.identity(), 0)
        with pytest.raises(CapExceeded):
            flow(state, 1.2, cover1)
        with pytest.raises(CapExceeded):
            flow(state, -1.2, cover1)

    def test_composition_matches_single_step(self, base, cover2):
        """Two short flows agree with one combined flow, sheets included."""
        rng = np.random.default_rng(1)
        worst_pt, worst_ang = 0.0, 0.0
        for _ in range(100):
            z = sample_domain(base, 1, rng)[0]
            ang = rng.uniform(0.0, 2.0 * math.pi)
            sheet = int(rng.integers(0, 2))
            state = FlowState(frame_of(UnitTangent(HPoint(z.real, z.imag), ang)), sheet)
            t1, t2 = rng.uniform(0.05, 0.5, 2)
            two = flow(flow(state, t1, cover2), t2, cover2)
            one = flow(state, t1 + t2, cover2)
            ta, tb = tangent_of(two.frame), tangent_of(one.frame)
            worst_pt = max(worst_pt, abs(ta.point.z - tb.point.z))
            dang = abs(ta.angle - tb.angle)
            worst_ang = max(worst_ang, min(dang, 2.0 * math.pi - dang))
            assert two.sheet == one.sheet
        assert worst_pt < 1e-8
        assert worst_ang < 1e-8

    def test_tangent_accessor(self):
        tang = FlowState(Moebius.identity(), 0).tangent()
        assert abs(tang.point.z - 1j) < 1e-12
        assert tang.angle == pytest.approx(0.5 * math.pi, abs=1e-12)

    def test_long_flow_stays_in_domain(self, base, cover1):
        frames, sheets = liouville_states(cover1, 500, seed=4)
        flowed, _ = flow_ensemble(cover1, frames, sheets, 5.0)
        z, _ = ensemble_positions(flowed)
        outside = sum(
            0 if dirichlet_domain_membership(base, HPoint(w.real, w.imag)) else 1
            for w in z
        )
        assert outside == 0

    def test_ensemble_total_cap(self, cover1):
        frames, sheets = liouville_states(cover1, 10, seed=0)
        with pytest.raises(CapExceeded):
            flow_ensemble(cover1, frames, sheets, 25.0)

    def test_ensemble_inputs_untouched(self, cover1):
        frames, sheets = liouville_states(cover1, 10, seed=0)
        keep = frames.copy()
        flow_ensemble(cover1, frames, sheets, 2.0)
        assert np.array_equal(frames, keep)


class TestLiouville:
    def test_minimum_size(self, cover1):
        with pytest.raises(ValueError):
            liouville_states(cover1, 1, seed=0)

    def test_deterministic(self, cover1):
        f1, s1 = liouville_states(cover1, 50, seed=8)
        f2, s2 = liouville_states(cover1, 50, seed=8)
        assert np.array_equal(f1, f2)
        assert np.array_equal(s1, s2)

    def test_frames_are_unimodular(self, cover1):
        frames, _ = liouville_states(cover1, 200, seed=5)
        det = frames[:, 0, 0] * frames[:, 1, 1] - frames[:, 0, 1] * frames[:, 1, 0]
        assert np.max(np.abs(det - 1.0)) < 1e-12

    def test_sheets_cover_range(self, cover2):
        _, sheets = liouville_states(cover2, 400, seed=6)
        assert set(np.unique(sheets)) == {0, 1}

    def test_invariance_chi_square(self, base, cover1):
        """Base points flowed by t=5 stay area-uniform over a 16-cell split."""
        n = 10_000
        frames, sheets = liouville_states(cover1, n, seed=9)
        flowed, _ = flow_ensemble(cover1, frames, sheets, 5.0)
        zf, _ = ensemble_positions(flowed)
        zr = sample_domain(base, n, np.random.default_rng(10))

        def cells(zarr):
            # 8 sectors by 2 shells around i, shell split at radius 1.1
            u = (zarr.real ** 2 + (zarr.imag - 1.0) ** 2) / (2.0 * zarr.imag)
            r = np.arccosh(1.0 + u)
            ang = np.arctan2(zarr.imag - 1.0, zarr.real)
            sector = ((ang + math.pi) / (2.0 * math.pi) * 8).astype(int) % 8
            return sector + 8 * (r > 1.1).astype(int)

        counts = np.stack([
            np.bincount(cells(zf), minlength=16),
            np.bincount(cells(zr), minlength=16),
        ])
        _, pvalue, _, _ = chi2_contingency(counts)
        assert pvalue > 0.01


class TestObservables:
    def test_indicator_values(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        z = np.array([1j, 3.0 + 0.1j])
        vals = obs(z, np.zeros(2, dtype=np.int64))
        assert vals[0] == 1.0
        assert vals[1] == 0.0

    def test_bump_profile(self, cover1):
        obs = bump_observable(cover1, CENTER, 0.6)
        center_val = obs(np.array([1j]), np.zeros(1, dtype=np.int64))[0]
        assert center_val == 1.0
        far_val = obs(np.array([0.0 + 2.2j]), np.zeros(1, dtype=np.int64))[0]
        assert far_val == 0.0
        rng = np.random.default_rng(12)
        z = sample_domain(bolza_group(), 300, rng)
        vals = obs(z, np.zeros(300, dtype=np.int64))
        assert np.all(vals >= 0.0)
        assert np.all(vals <= 1.0)

    def test_radius_validation(self, cover1):
        with pytest.raises(ValueError):
            ball_indicator(cover1, CENTER, 0.0)
        with pytest.raises(ValueError):
            bump_observable(cover1, CENTER, -0.5)

    def test_sheet_mass_halves_on_double_cover(self, cover1, cover2):
        """A one-sheet ball holds half the measure on the degree-2 cover."""
        obs1 = ball_indicator(cover1, CENTER, 0.5)
        obs2 = ball_indicator(cover2, CENTER, 0.5)
        f1, s1 = liouville_states(cover1, 20_000, seed=14)
        f2, s2 = liouville_states(cover2, 20_000, seed=15)
        z1, _ = ensemble_positions(f1)
        z2, _ = ensemble_positions(f2)
        p1 = obs1(z1, s1).mean()
        p2 = obs2(z2, s2).mean()
        se = math.sqrt(p1 / 20_000) + math.sqrt(p2 / 20_000)
        assert abs(p2 - 0.5 * p1) < 4.0 * se


class TestCorrelation:
    def test_zero_time_matches_direct_covariance(self, base, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        est, stderr = correlation(cover1, obs, obs, 0.0, 20_000, seed=3)
        z = sample_domain(base, 20_000, np.random.default_rng(21))
        vals = obs(z, np.zeros(20_000, dtype=np.int64))
        direct = float(np.cov(vals, ddof=1))
        direct_se = float(np.std((vals - vals.mean()) ** 2, ddof=1) / math.sqrt(20_000))
        assert abs(est - direct) <= 3.0 * (stderr + direct_se)

    def test_constant_observables_vanish(self, cover1):
        const = lambda z, s, a=None: np.ones(len(z))
        est, _ = correlation(cover1, const, const, 3.0, 5_000, seed=3)
        assert abs(est) < 1e-12

    def test_deterministic_per_seed(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        first = correlation(cover1, obs, obs, 1.5, 4_000, seed=11)
        second = correlation(cover1, obs, obs, 1.5, 4_000, seed=11)
        other = correlation(cover1, obs, obs, 1.5, 4_000, seed=12)
        assert first == second
        assert first != other

    def test_total_cap(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        with pytest.raises(CapExceeded):
            correlation(cover1, obs, obs, 25.0, 1_000, seed=0)

    def test_angle_perturbation_symmetric(self, cover1):
        """Fiber-mean-zero angle terms leave the correlation alone when the
        configuration shares the quotient's order-8 rotational symmetry."""
        ball = ball_indicator(cover1, CENTER, 0.5)
        weight = bump_observable(cover1, CENTER, 0.5)

        def perturbed(z, sheets, angles=None):
            h = 0.7 * np.sin(angles) + 0.3 * np.cos(2.0 * angles)
            return ball(z, sheets, angles) + h * weight(z, sheets, angles)

        for t in (0.0, 1.0, 2.0):
            e1, s1 = correlation(cover1, ball, ball, t, 30_000, seed=13)
            e2, s2 = correlation(cover1, ball, perturbed, t, 30_000, seed=13)
            assert abs(e2 - e1) <= 3.0 * (s1 + s2)

    def test_angle_perturbation_generic_at_time_zero(self, cover1):
        ball = ball_indicator(cover1, SurfacePoint(HPoint(0.35, 1.25), 0), 0.5)
        weight = bump_observable(cover1, SurfacePoint(HPoint(-0.5, 0.8), 0), 0.5)

        def perturbed(z, sheets, angles=None):
            return ball(z, sheets, angles) + np.sin(angles) * weight(z, sheets, angles)

        e1, s1 = correlation(cover1, ball, ball, 0.0, 30_000, seed=17)
        e2, s2 = correlation(cover1, ball, perturbed, 0.0, 30_000, seed=17)
        assert abs(e2 - e1) <= 3.0 * (s1 + s2)


class TestDecayCurve:
    def test_grid_validation(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        with pytest.raises(ValueError):
            correlation_curve(cover1, obs, obs, [1.0, 0.5], 1_000, seed=0)
        with pytest.raises(ValueError):
            correlation_curve(cover1, obs, obs, [-1.0, 0.5], 1_000, seed=0)
        with pytest.raises(CapExceeded):
            correlation_curve(cover1, obs, obs, [1.0, 30.0], 1_000, seed=0)

    def test_rows_within_envelope(self, cover1):
        """Ball autocorrelation sits inside the decay envelope at every time."""
        obs = ball_indicator(cover1, CENTER, 0.5)
        params = MixingParams(3.84)
        rows = correlation_curve(
            cover1, obs, obs, range(1, 9), 20_000, seed=2, params=params)
        for row in rows:
            assert abs(row["estimate"]) <= row["bound"] + 3.0 * row["stderr"]
        assert all(isinstance(row["resolved"], bool) for row in rows)
        bounds = [row["bound"] for row in rows]
        assert all(b2 < b1 for b1, b2 in zip(bounds, bounds[1:]))

    def test_curve_matches_single_calls(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        rows = correlation_curve(cover1, obs, obs, [0.0, 1.0], 5_000, seed=5)
        single0 = correlation(cover1, obs, obs, 0.0, 5_000, seed=5)
        single1 = correlation(cover1, obs, obs, 1.0, 5_000, seed=5)
        assert rows[0]["estimate"] == single0[0]
        assert rows[1]["estimate"] == pytest.approx(single1[0], abs=1e-12)

    def test_unparameterized_rows(self, cover1):
        obs = ball_indicator(cover1, CENTER, 0.5)
        rows = correlation_curve(cover1, obs, obs, [0.0, 1.0], 2_000, seed=5)
        assert math.isnan(rows[0]["bound"])
        assert rows[0]["resolved"] is False

    def test_decay_slope(self, cover1):
        """Mean-zero two-bump autocorrelation decays at least as fast as the
        envelope rate allows, over the rows that rise above the noise."""
        b1 = bump_observable(cover1, CENTER, 0.6)
        b2 = bump_observable(cover1, SurfacePoint(HPoint(0.6, 1.7), 0), 0.6)

        def f(z, sheets, angles=None):
            return b1(z, sheets, angles) - b2(z, sheets, angles)

        params = MixingParams(3.84)
        grid = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        rows = correlation_curve(cover1, f, f, grid, 40_000, seed=7, params=params)
        slope = fit_decay_rate(rows)
        assert slope <= -params.beta + 0.3
        assert slope > -6.0


class TestCsvAndFit:
    def test_csv_round_trip(self, cover1, tmp_path):
        obs = ball_indicator(cover1, CENTER, 0.5)
        params = MixingParams(3.84)
        rows = correlation_curve(
            cover1, obs, obs, [0.0, 1.0, 2.0], 3_000, seed=6, params=params)
        path = tmp_path / "decay.csv"
        write_decay_csv(path, rows)
        with path.open() as fh:
            reader = csv.reader(fh)
            header = next(reader)
            body = list(reader)
        assert header == ["t", "estimate", "stderr", "bound", "resolved"]
        assert len(body) == 3
        for line, row in zip(body, rows):
            assert float(line[0]) == row["t"]
            assert float(line[1]) == row["estimate"]
            assert float(line[2]) == row["stderr"]
            assert float(line[3]) == row["bound"]
            assert line[4] in ("true", "false")
            assert (line[4] == "true") == row["resolved"]

    def test_fit_recovers_synthetic_rate(self):
        rows = [
            {"t": float(t), "estimate": math.exp(-1.3 * t), "stderr": 1e-12}
            for t in range(6)
        ]
        assert fit_decay_rate(rows) == pytest.approx(-1.3, abs=1e-9)

    def test_fit_ignores_noise_floor_rows(self):
        rows = [
            {"t": float(t), "estimate": math.exp(-1.3 * t), "stderr": 1e-12}
            for t in range(4)
        ]
        rows += [
            {"t": float(t), "estimate": 2e-4, "stderr": 1e-4}
            for t in range(4, 10)
        ]
        assert fit_decay_rate(rows) == pytest.approx(-1.3, abs=1e-9)

    def test_fit_needs_two_resolvable_rows(self):
        rows = [
            {"t": 0.0, "estimate": 1.0, "stderr": 1e-6},
            {"t": 1.0, "estimate": 1e-5, "stderr": 1e-4},
        ]
        with pytest.raises(ValueError):
            fit_decay_rate(rows)
