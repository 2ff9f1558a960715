"""Tests for surface sampling, graph Laplacian assembly, and windowed spectra."""
import math

import numpy as np
import pytest

from hyperwave.errors import (
    DisconnectedGraph,
    HypothesisViolated,
    InvalidParams,
    UndefinedRho,
    WindowUnreliable,
)
from hyperwave.fuchsian import (
    SurfacePoint,
    bolza_group,
    cyclic_cover,
    dirichlet_domain_membership,
    domain_volume_estimate,
    injectivity_radius,
    quotient_dist,
    trivial_cover,
)
from hyperwave.geometry import HPoint
from hyperwave.kernels import WindowSpec
from hyperwave.spectral import (
    BASE_AREA,
    SpectralData,
    assemble_operator,
    counting_lower_bound_check,
    make_potential,
    sample_surface,
    solve_window,
    suggested_epsilon,
    tuned_epsilon,
    weyl_density,
)

# Pinned by three mutually independent quadratures (notes kept alongside the
# build): adaptive in r, adaptive in the spectral variable, Simpson-Richardson.
# All agree to 8e-17.
WEYL_REFERENCE = 0.23862322861879587


def _tuned(points):
    # closed form of tuned_epsilon for a degree-1 sample of this size
    return 0.25 * math.sqrt(BASE_AREA / points)


@pytest.fixture(scope="module")
def cover1():
    return trivial_cover(bolza_group())


@pytest.fixture(scope="module")
def sample200(cover1):
    return sample_surface(cover1, 200, seed=3, eps=_tuned(200))


@pytest.fixture(scope="module")
def H200(sample200):
    return assemble_operator(sample200, None, _tuned(200))


# chain (free eigenvalues at three refinement levels) comes from
# conftest.py; session scope, shared with the acceptance gate.


class TestSampleSurface:
    def test_sheet_structure(self):
        cover = cyclic_cover(bolza_group(), 2)
        s = sample_surface(cover, 60, seed=5)
        assert s.n_points == 120
        assert np.array_equal(s.sheets, np.repeat(np.arange(2), 60))
        assert s.volume == pytest.approx(2 * BASE_AREA, rel=1e-12)
        assert s.weight * s.n_points == pytest.approx(s.volume, rel=1e-12)

    def test_identical_seeds_identical_samples(self, cover1):
        a = sample_surface(cover1, 60, seed=9)
        b = sample_surface(cover1, 60, seed=9)
        assert np.array_equal(a.base_z, b.base_z)
        assert np.array_equal(a.dvals, b.dvals)
        assert a.nn_scale == b.nn_scale

    def test_distinct_seeds_differ(self, cover1):
        a = sample_surface(cover1, 60, seed=9)
        b = sample_surface(cover1, 60, seed=10)
        assert not np.array_equal(a.base_z, b.base_z)

    def test_points_lie_in_domain(self, cover1):
        s = sample_surface(cover1, 60, seed=2)
        group = cover1.base
        for z in s.base_z:
            assert dirichlet_domain_membership(group, HPoint(z.real, z.imag))

    def test_area_per_point(self, cover1):
        est, stderr = domain_volume_estimate(cover1.base, 100_000, seed=1)
        assert abs(est - BASE_AREA) <= 0.05 * BASE_AREA
        s = sample_surface(cover1, 60, seed=2)
        assert s.weight == pytest.approx(BASE_AREA / 60, rel=1e-12)

    def test_minimum_size_guard(self, cover1):
        with pytest.raises(ValueError):
            sample_surface(cover1, 49, seed=0)

    def test_recorded_distances_match_quotient_metric(self, cover1):
        s = sample_surface(cover1, 60, seed=4)
        rng = np.random.default_rng(0)
        picks = rng.choice(len(s.rows), size=12, replace=False)
        for k in picks:
            i, j = int(s.rows[k]), int(s.cols[k])
            p = SurfacePoint(HPoint(s.base_z[i].real, s.base_z[i].imag), int(s.sheets[i]))
            q = SurfacePoint(HPoint(s.base_z[j].real, s.base_z[j].imag), int(s.sheets[j]))
            ref = quotient_dist(cover1, p, q, s.cutoff + 1.0)
            assert abs(s.dvals[k] - ref) <= 1e-9

    def test_bandwidth_hint_extends_cutoff(self, cover1):
        plain = sample_surface(cover1, 200, seed=6)
        hinted = sample_surface(cover1, 200, seed=6, eps=0.04)
        assert hinted.cutoff > plain.cutoff
        assert hinted.cutoff == pytest.approx(6.0 * math.sqrt(0.04), rel=1e-12)
        assert hinted.dvals.max() <= hinted.cutoff
        assert hinted.dvals.max() > plain.cutoff


class TestBandwidthRules:
    def test_default_rule_is_squared_spacing(self, sample200):
        assert suggested_epsilon(sample200) == pytest.approx(sample200.nn_scale**2, rel=1e-12)

    def test_tuned_rule_matches_closed_form(self, sample200):
        assert tuned_epsilon(sample200) == pytest.approx(_tuned(200), rel=1e-12)


class TestAssembleOperator:
    def test_zero_potential_constant_kernel(self, H200):
        lam = H200.eigenvalues
        assert abs(lam[0]) <= 1e-8
        n = H200.matrix.shape[0]
        c = np.ones(n) / math.sqrt(n)
        assert np.linalg.norm(H200.matrix @ c) <= 1e-8

    def test_positive_semidefinite(self, H200):
        assert H200.eigenvalues[0] >= -1e-10

    def test_constant_shift_is_exact(self, sample200, H200):
        n = sample200.n_points
        shifted = assemble_operator(sample200, np.full(n, 0.7), _tuned(200))
        assert np.array_equal(shifted.matrix, H200.matrix + np.diag(np.full(n, 0.7)))
        assert np.max(np.abs(shifted.eigenvalues - (H200.eigenvalues + 0.7))) <= 1e-9
        # the free eigenvectors still diagonalize the shifted operator
        V0 = H200.eigenvectors
        resid = shifted.matrix @ V0 - V0 * (H200.eigenvalues + 0.7)[None, :]
        assert np.max(np.abs(resid)) <= 1e-9

    def test_lambda1_against_refinement_reference(self, chain):
        seq = [chain[p][1] for p in (500, 1000, 2000)]
        # bias is first order in the bandwidth, which shrinks by sqrt(2)
        # per level, so extrapolate in that ratio
        reference = seq[2] + (seq[2] - seq[1]) / (math.sqrt(2.0) - 1.0)
        assert abs(seq[2] - reference) <= 0.25 * reference

    def test_low_modes_cauchy_under_refinement(self, chain):
        for k in (1, 2, 3):
            seq = [chain[p][k] for p in (500, 1000, 2000)]
            step1 = abs(seq[1] - seq[0]) / abs(seq[1])
            step2 = abs(seq[2] - seq[1]) / abs(seq[2])
            assert step1 <= 0.15, f"mode {k} moved {step1:.3f} from 500 to 1000"
            assert step2 <= 0.08, f"mode {k} moved {step2:.3f} from 1000 to 2000"

    def test_bandwidth_validation(self, sample200):
        with pytest.raises(ValueError):
            assemble_operator(sample200, None, 0.0)
        with pytest.raises(ValueError):
            assemble_operator(sample200, None, -0.01)
        with pytest.raises(ValueError):
            assemble_operator(sample200, None, 0.7)

    def test_tiny_bandwidth_disconnects(self, sample200):
        with pytest.raises(DisconnectedGraph):
            assemble_operator(sample200, None, (sample200.nn_scale / 60.0) ** 2)

    def test_potential_object_and_vector_agree(self, sample200, cover1):
        pot = make_potential("induced_bump", {"radius": 0.4, "height": 0.8}, cover1)
        via_obj = assemble_operator(sample200, pot, _tuned(200))
        via_vec = assemble_operator(sample200, pot.evaluate(sample200), _tuned(200))
        assert np.array_equal(via_obj.matrix, via_vec.matrix)

    def test_wrong_length_vector(self, sample200):
        with pytest.raises(ValueError):
            assemble_operator(sample200, np.zeros(7), _tuned(200))


@pytest.fixture(scope="module")
def sdata(H200, sample200):
    return solve_window(H200, WindowSpec(1.25, 9.25), sample200.weight)


class TestSolveWindow:
    def test_window_below_spectrum_is_empty(self, sample200):
        n = sample200.n_points
        lifted = assemble_operator(sample200, np.full(n, 5.0), _tuned(200))
        out = solve_window(lifted, WindowSpec(1.25, 2.25), sample200.weight)
        assert out.count == 0
        assert out.eigenvalues.size == 0
        assert out.rho.size == 0

    def test_count_nondecreasing_in_window(self, H200, sample200):
        counts = []
        for b in (4.0, 6.0, 8.0):
            out = solve_window(H200, WindowSpec(2.0, b), sample200.weight)
            direct = int(np.sum((H200.eigenvalues >= 2.0) & (H200.eigenvalues <= b)))
            assert out.count == direct
            counts.append(out.count)
        assert counts == sorted(counts)

    def test_full_basis_frobenius_identity(self, sample200, H200):
        # lift the spectrum above the window floor so every mode is in range
        n = sample200.n_points
        w = sample200.weight
        lifted = assemble_operator(sample200, np.full(n, 1.0), _tuned(200))
        top = float(lifted.eigenvalues[-1])
        data = solve_window(lifted, WindowSpec(0.5, top), w, trusted_fraction=1.0)
        assert data.count == n
        rng = np.random.default_rng(12)
        a = rng.uniform(-1.0, 2.0, n)
        modes = data.eigenvectors
        gram = modes.T @ modes * w
        assert np.max(np.abs(gram - np.eye(n))) <= 1e-10
        A = modes.T @ (modes * (a * w)[:, None])
        frob_sq = float(np.sum(A * A))
        assert frob_sq == pytest.approx(float(np.sum(a * a)), rel=1e-10)

    def test_window_beyond_trusted_band(self, H200, sample200):
        lam = H200.eigenvalues
        b = float(lam[40])
        assert b > float(lam[19])
        with pytest.raises(WindowUnreliable):
            solve_window(H200, WindowSpec(2.0, b), sample200.weight)
        # widening the trusted fraction admits the same window
        out = solve_window(H200, WindowSpec(2.0, b), sample200.weight,
                           trusted_fraction=0.5)
        assert out.count >= 1

    def test_rho_values(self, sdata):
        assert not sdata.below_quarter.any()
        expect = np.sqrt(sdata.eigenvalues - 0.25)
        assert np.max(np.abs(sdata.rho - expect)) <= 1e-12
        assert sdata.rho_of(0) == pytest.approx(expect[0], rel=1e-12)

    def test_rho_undefined_below_quarter(self):
        data = SpectralData(
            eigenvalues=np.array([0.1]),
            eigenvectors=np.zeros((3, 1)),
            rho=np.array([np.nan]),
            below_quarter=np.array([True]),
            window=None,
            weight=1.0,
            all_eigenvalues=np.array([0.1]),
        )
        with pytest.raises(UndefinedRho):
            data.rho_of(0)

    def test_metadata(self, sdata, sample200):
        md = sdata.metadata
        assert md["n_modes"] == sample200.n_points
        assert md["lambda0_residual"] <= 1e-8
        assert md["trusted_max"] >= 9.25

    def test_json_roundtrip(self, tmp_path, sdata):
        path = tmp_path / "spec.json"
        side = tmp_path / "spec.vec"
        sdata.to_json(path, side)
        back = SpectralData.from_json(path)
        assert np.array_equal(back.eigenvalues, sdata.eigenvalues)
        assert np.array_equal(back.eigenvectors, sdata.eigenvectors)
        assert back.window.a == sdata.window.a and back.window.b == sdata.window.b
        assert back.weight == sdata.weight
        assert np.array_equal(back.all_eigenvalues, sdata.all_eigenvalues)
        # sidecar layout: row-major little-endian doubles, one mode per row
        raw = np.frombuffer(side.read_bytes(), dtype="<f8")
        mat = raw.reshape(sdata.count, -1)
        assert np.array_equal(mat[0], sdata.eigenvectors[:, 0])

    def test_weight_validation(self, H200):
        with pytest.raises(ValueError):
            solve_window(H200, WindowSpec(2.0, 4.0), 0.0)


class TestWeylDensity:
    def test_pinned_window(self):
        val = weyl_density(WindowSpec(1.25, 4.25))
        assert val == pytest.approx(WEYL_REFERENCE, rel=1e-8)

    def test_degenerate_window_is_zero(self):
        assert weyl_density((2.0, 2.0)) == 0.0

    def test_tuple_and_spec_agree(self):
        assert weyl_density((1.25, 4.25)) == weyl_density(WindowSpec(1.25, 4.25))

    def test_large_window_flat_density(self):
        a, b = 10.25, 30.25
        flat = (b - a) / (4.0 * math.pi)
        assert weyl_density((a, b)) == pytest.approx(flat, rel=0.01)

    def test_additivity(self):
        whole = weyl_density((1.25, 4.25))
        split = weyl_density((1.25, 2.5)) + weyl_density((2.5, 4.25))
        assert whole == pytest.approx(split, rel=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            weyl_density((0.2, 1.0))
        with pytest.raises(ValueError):
            weyl_density((3.0, 1.0))


class TestWeylComparison:
    def test_count_density_within_band(self, chain):
        lam = chain[2000]
        for a, b in ((1.25, 9.25), (1.25, 12.25)):
            count = int(np.sum((lam >= a) & (lam <= b)))
            expected = weyl_density((a, b)) * BASE_AREA
            assert abs(count - expected) <= 0.30 * expected, (
                f"window [{a},{b}]: count {count} vs {expected:.2f}")


@pytest.fixture(scope="module")
def free_data(H200, sample200):
    return solve_window(H200, WindowSpec(1.25, 9.25), sample200.weight)


class TestCountingBound:
    def test_zero_potential_equality(self, free_data):
        report = counting_lower_bound_check(
            free_data, free_data, WindowSpec(2.0, 8.0), 0.0, 0.0)
        assert report["passed"]
        assert report["count_perturbed"] == report["count_free_shifted"]

    def test_constant_shift_counts(self, sample200, H200, free_data):
        n = sample200.n_points
        shifted = assemble_operator(sample200, np.full(n, 0.7), _tuned(200))
        sdata = solve_window(shifted, WindowSpec(1.25, 9.25), sample200.weight)
        report = counting_lower_bound_check(
            free_data, sdata, WindowSpec(2.0, 8.0), 0.7, 0.7)
        assert report["passed"]
        lam0 = free_data.all_eigenvalues
        lamv = sdata.all_eigenvalues
        exact = int(np.sum((lam0 >= 1.3) & (lam0 <= 7.3)))
        assert int(np.sum((lamv >= 2.0) & (lamv <= 8.0))) == exact

    def test_random_bounded_potentials(self, sample200, free_data):
        n = sample200.n_points
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            v = rng.uniform(-0.3, 0.3, n)
            hv = assemble_operator(sample200, v, _tuned(200))
            sdata = solve_window(hv, WindowSpec(1.25, 9.25), sample200.weight)
            report = counting_lower_bound_check(
                free_data, sdata, WindowSpec(2.0, 9.0), -0.3, 0.3)
            assert report["passed"], f"seed {seed}: {report}"

    def test_empty_shifted_window_rejected(self, free_data):
        with pytest.raises(HypothesisViolated):
            counting_lower_bound_check(
                free_data, free_data, WindowSpec(2.0, 2.5), 0.0, 0.6)


class TestInterlacing:
    def test_rank_one_perturbation(self, cover1):
        eps = _tuned(60)
        s = sample_surface(cover1, 60, seed=21, eps=eps)
        h0 = assemble_operator(s, None, eps)
        v = np.zeros(s.n_points)
        v[7] = 2.0
        hv = assemble_operator(s, v, eps)
        lam0, lamv = h0.eigenvalues, hv.eigenvalues
        assert np.all(lamv >= lam0 - 1e-10)
        assert np.all(lamv[:-1] <= lam0[1:] + 1e-10)


class TestMakePotential:
    def test_weak_coupling_zero(self, cover1, sample200):
        pot = make_potential(
            "weak_coupling", {"epsilon": 0.0, "radius": 0.4, "height": 1.0}, cover1)
        assert pot.c_min == 0.0 and pot.c_max == 0.0
        assert not pot.evaluate(sample200).any()

    def test_weak_coupling_linear_in_epsilon(self, cover1, sample200):
        full = make_potential(
            "weak_coupling", {"epsilon": 1.0, "radius": 0.4, "height": 1.0}, cover1)
        half = make_potential(
            "weak_coupling", {"epsilon": 0.5, "radius": 0.4, "height": 1.0}, cover1)
        assert np.array_equal(half.evaluate(sample200),
                              0.5 * full.evaluate(sample200))

    def test_point_cloud_disjoint_sup(self, cover1, sample200):
        c1 = SurfacePoint(HPoint(0.0, 1.0), 0)
        c2 = SurfacePoint(HPoint(0.5, 1.6), 0)
        radius = 0.2
        sep = quotient_dist(cover1, c1, c2, 3.0)
        assert sep > 2 * radius
        pot = make_potential(
            "point_cloud",
            {"centers": [c1, c2], "radius": radius, "height": 0.9},
            cover1)
        assert pot.c_max == 0.9
        vals = pot.evaluate(sample200)
        assert vals.max() <= 0.9 + 1e-12
        assert vals.min() >= 0.0

    def test_point_cloud_overlap_rejected(self, cover1):
        c1 = SurfacePoint(HPoint(0.0, 1.0), 0)
        c2 = SurfacePoint(HPoint(0.1, 1.05), 0)
        with pytest.raises(InvalidParams):
            make_potential(
                "point_cloud",
                {"centers": [c1, c2], "radius": 0.2, "height": 0.9},
                cover1)

    def test_radius_validation(self, cover1):
        with pytest.raises(InvalidParams):
            make_potential("induced_bump", {"radius": -0.1, "height": 1.0}, cover1)
        injrad = injectivity_radius(cover1, HPoint(0.0, 1.0))
        with pytest.raises(InvalidParams):
            make_potential(
                "induced_bump", {"radius": injrad + 0.5, "height": 1.0}, cover1)

    def test_missing_parameter(self, cover1):
        with pytest.raises(InvalidParams):
            make_potential("induced_bump", {"radius": 0.4}, cover1)
        with pytest.raises(InvalidParams):
            make_potential("no_such_kind", {}, cover1)

    def test_constant_plus_thin_bounds(self, cover1, sample200):
        pot = make_potential(
            "constant_plus_thin",
            {"constant": 0.3, "radius": 0.4, "height": 0.5},
            cover1)
        assert pot.c_min == pytest.approx(0.3)
        assert pot.c_max == pytest.approx(0.8)
        vals = pot.evaluate(sample200)
        assert vals.min() >= 0.3 - 1e-12
        assert vals.max() <= 0.8 + 1e-12

    def test_induced_bump_l2_independent_of_degree(self):
        group = bolza_group()
        results = []
        for degree, seed in ((1, 31), (2, 32), (4, 33)):
            cover = trivial_cover(group) if degree == 1 else cyclic_cover(group, degree)
            pot = make_potential("induced_bump", {"radius": 0.4, "height": 1.0}, cover)
            s = sample_surface(cover, 400, seed=seed)
            results.append(pot.l2_estimate(s))
        base, base_se = results[0]
        for est, se in results[1:]:
            assert abs(est - base) <= 4.0 * (se + base_se)

    def test_induced_bump_single_sheet_support(self):
        cover = cyclic_cover(bolza_group(), 2)
        pot = make_potential("induced_bump", {"radius": 0.4, "height": 1.0}, cover)
        s = sample_surface(cover, 120, seed=7)
        vals = pot.evaluate(s)
        assert vals[s.sheets == 1].max() == 0.0
        assert vals[s.sheets == 0].max() > 0.0

    def test_cover_mismatch_guard(self, sample200):
        other = cyclic_cover(bolza_group(), 2)
        pot = make_potential("induced_bump", {"radius": 0.4, "height": 1.0}, other)
        with pytest.raises(ValueError):
            pot.evaluate(sample200)
