"""Point-cloud discretization of Schrodinger operators on quotient surfaces.

The surface is represented by an area-uniform sample of the Dirichlet
domain on every sheet of a cover. Pairwise quotient distances below a
cutoff feed a heat-kernel graph Laplacian (row-normalized, symmetrized,
calibrated against the flat second moment of the truncated kernel), and
potentials act as diagonal multiplication. Eigenpairs inside a spectral
window come from the dense eigendecomposition, orthonormalized under the
equal-mass discrete measure w_i = Vol(X)/N.

Accuracy is first order in the kernel bandwidth; tolerances downstream
are set accordingly. The trusted part of the discrete spectrum is the
lowest tenth of the modes unless the caller overrides it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    DisconnectedGraph,
    HypothesisViolated,
    InvalidParams,
    UndefinedRho,
    WindowUnreliable,
)
from .fuchsian import (
    CoverDescriptor,
    SurfacePoint,
    as_cover,
    domain_circumradius,
    enumerate_ball,
    injectivity_radius,
    sample_domain,
)
from .geometry import HPoint, apply_many
from .kernels import WindowSpec
from .opcalc import HermitianOperator

BASE_AREA = 4.0 * math.pi  # Gauss-Bonnet for the genus-2 base surface
CUTOFF_FACTOR = 6.0  # cutoff = 3 kernel widths, width 2 sqrt(eps), eps = nn^2
TRUSTED_FRACTION = 0.10
BASE_CENTER = HPoint(0.0, 1.0)


def _as_surface_point(value) -> SurfacePoint:
    if isinstance(value, SurfacePoint):
        return value
    if isinstance(value, HPoint):
        return SurfacePoint(value, 0)
    if isinstance(value, complex):
        return SurfacePoint(HPoint(value.real, value.imag), 0)
    raise InvalidParams(f"cannot interpret {value!r} as a surface point")


def _translate_ball(cover: CoverDescriptor, reach: float):
    """Lattice ball large enough to realize quotient distances up to reach."""
    rho = domain_circumradius(cover.base)
    return enumerate_ball(cover, BASE_CENTER, BASE_CENTER, reach + 2.0 * rho + 1e-6)


def _pair_distance_matrix(cover: CoverDescriptor, zs: np.ndarray, sheets: np.ndarray,
                          cutoff: float) -> np.ndarray:
    """Dense matrix of quotient distances, inf beyond cutoff.

    Points must be sheet-major with equal block sizes. For each lattice
    element gamma the candidate d(z_i, gamma z_j) is admissible when the
    sheet permutation of gamma sends sheet(j) to sheet(i), so each element
    touches one block of the matrix per source sheet. Minima are folded in
    the cosh-gap variable u = cosh d - 1 and converted at the end through
    d = 2 asinh(sqrt(u / 2)).
    """
    n = len(zs)
    degree = cover.degree
    p = n // degree
    if p * degree != n or np.any(sheets != np.repeat(np.arange(degree), p)):
        raise ValueError("points must be sheet-major with equal per-sheet counts")
    ball = _translate_ball(cover, cutoff)
    u_cut = math.cosh(cutoff) - 1.0
    best = np.full((n, n), np.inf)
    inv2y = 1.0 / (2.0 * zs.imag)
    for (m, perm), _d0 in zip(ball.elements, ball.distances):
        w = apply_many(m, zs)
        for s_from in range(degree):
            s_to = perm[s_from] if perm is not None else 0
            rows = slice(s_to * p, (s_to + 1) * p)
            cols = slice(s_from * p, (s_from + 1) * p)
            diff = np.abs(zs[rows, None] - w[None, cols])
            u = (diff * diff) * inv2y[rows, None] / w.imag[None, cols]
            np.minimum(best[rows, cols], u, out=best[rows, cols])
    best = np.minimum(best, best.T)
    out = np.full((n, n), np.inf)
    keep = best <= u_cut
    out[keep] = 2.0 * np.arcsinh(np.sqrt(0.5 * best[keep]))
    np.fill_diagonal(out, 0.0)
    return out


@dataclass
class SurfaceSample:
    """Area-uniform point sample of a cover with sparse quotient distances."""

    cover: CoverDescriptor
    base_z: np.ndarray
    sheets: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    dvals: np.ndarray
    cutoff: float
    nn_scale: float
    points_per_sheet: int
    seed: int

    @property
    def n_points(self) -> int:
        return len(self.base_z)

    @property
    def volume(self) -> float:
        return BASE_AREA * self.cover.degree

    @property
    def density(self) -> float:
        return self.n_points / self.volume

    @property
    def weight(self) -> float:
        """Equal quadrature mass per point."""
        return self.volume / self.n_points

    def points(self) -> list[SurfacePoint]:
        return [
            SurfacePoint(HPoint(z.real, z.imag), int(s))
            for z, s in zip(self.base_z, self.sheets)
        ]

    def distance_dense(self) -> np.ndarray:
        """Dense symmetric distance matrix, inf beyond the cutoff."""
        n = self.n_points
        out = np.full((n, n), np.inf)
        out[self.rows, self.cols] = self.dvals
        np.fill_diagonal(out, 0.0)
        return out


def sample_surface(cover: CoverDescriptor, points_per_sheet: int, seed: int,
                   eps: float | None = None) -> SurfaceSample:
    """Sample every sheet of the cover uniformly against hyperbolic area.

    Rejection sampling in the Dirichlet domain, repeated per sheet, so
    each sheet carries exactly points_per_sheet points. Quotient distances
    are recorded up to three kernel widths of the planned assembly
    bandwidth: the given eps, or the median nearest-neighbor rule when
    eps is omitted.
    """
    cover = as_cover(cover)
    if points_per_sheet < 50:
        raise ValueError(f"need at least 50 points per sheet, got {points_per_sheet}")
    group = cover.base
    rng = np.random.default_rng(seed)
    blocks = [sample_domain(group, points_per_sheet, rng) for _ in range(cover.degree)]
    zs = np.concatenate(blocks)
    sheets = np.repeat(np.arange(cover.degree), points_per_sheet)

    area_per_point = BASE_AREA / points_per_sheet
    delta0 = 0.5 * math.sqrt(area_per_point)
    width = max(delta0, math.sqrt(eps)) if eps is not None else delta0
    cutoff = 1.5 * CUTOFF_FACTOR * width
    for _ in range(3):
        dmat = _pair_distance_matrix(cover, zs, sheets, cutoff)
        off = dmat + np.diag(np.full(len(zs), np.inf))
        nn = off.min(axis=1)
        if not np.all(np.isfinite(nn)):
            cutoff *= 1.5
            continue
        nn_scale = float(np.median(nn))
        final_width = max(nn_scale, math.sqrt(eps)) if eps is not None else nn_scale
        final_cutoff = CUTOFF_FACTOR * final_width
        if final_cutoff <= cutoff:
            break
        cutoff = 1.2 * final_cutoff
    else:
        raise DisconnectedGraph("could not reach every point's nearest neighbor")

    keep = np.isfinite(dmat) & (dmat <= final_cutoff)
    np.fill_diagonal(keep, False)
    rows, cols = np.nonzero(keep)
    return SurfaceSample(
        cover=cover,
        base_z=zs,
        sheets=sheets,
        rows=rows,
        cols=cols,
        dvals=dmat[rows, cols],
        cutoff=final_cutoff,
        nn_scale=nn_scale,
        points_per_sheet=points_per_sheet,
        seed=seed,
    )


def suggested_epsilon(sample: SurfaceSample) -> float:
    """Default kernel bandwidth: squared median nearest-neighbor spacing."""
    return sample.nn_scale**2


def tuned_epsilon(sample: SurfaceSample) -> float:
    """Accuracy-oriented bandwidth, a quarter of the mean point spacing.

    The nearest-neighbor default keeps the expected neighbor count fixed
    as the sample grows, so its eigenvalue estimates stop converging.
    This rule shrinks like n^(-1/2) instead of n^(-1), trading graph
    sparsity for a bias that vanishes under refinement. Pass the result
    as the eps hint to sample_surface when building a sample meant for
    eigenvalue work, so recorded distances cover the kernel.
    """
    return 0.25 * math.sqrt(sample.volume / sample.n_points)


def assemble_operator(sample: SurfaceSample, V, eps: float) -> HermitianOperator:
    """Heat-kernel graph Laplacian plus diagonal potential.

    Weights exp(-d^2 / 4 eps) on recorded pairs are row-normalized,
    symmetrized, and scaled by 1 / (c eps) with c the second moment of the
    truncated flat kernel, so the spectrum approximates the Laplacian's.
    """
    if eps <= 0:
        raise ValueError(f"kernel bandwidth must be positive, got {eps}")
    injrad = injectivity_radius(sample.cover.base, BASE_CENTER)
    if 2.0 * math.sqrt(eps) > injrad:
        raise ValueError(
            f"kernel width {2.0 * math.sqrt(eps):.4f} exceeds the injectivity radius {injrad:.4f}")
    n = sample.n_points
    r_eff = min(sample.cutoff, CUTOFF_FACTOR * math.sqrt(eps))
    keep = sample.dvals <= r_eff
    rows, cols, dv = sample.rows[keep], sample.cols[keep], sample.dvals[keep]

    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    if n_comp != 1:
        raise DisconnectedGraph(f"proximity graph has {n_comp} components")

    W = np.zeros((n, n))
    W[rows, cols] = np.exp(-(dv * dv) / (4.0 * eps))
    W = 0.5 * (W + W.T)
    np.fill_diagonal(W, 0.0)
    rowsum = W.sum(axis=1)
    A = W / rowsum[:, None]
    Ws = 0.5 * (A + A.T)
    Ds = Ws.sum(axis=1)

    x = r_eff * r_eff / (4.0 * eps)
    calib = (1.0 - (1.0 + x) * math.exp(-x)) / (1.0 - math.exp(-x))
    L = (np.diag(Ds) - Ws) / (calib * eps)

    if V is None:
        v = np.zeros(n)
    elif isinstance(V, Potential):
        v = V.evaluate(sample)
    else:
        v = np.asarray(V, dtype=float)
        if v.shape != (n,):
            raise ValueError(f"potential vector must have length {n}, got shape {v.shape}")
    return HermitianOperator(L + np.diag(v))


@dataclass
class SpectralData:
    """Eigenpairs inside a window, orthonormal under the discrete measure."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rho: np.ndarray
    below_quarter: np.ndarray
    window: WindowSpec | None
    weight: float
    all_eigenvalues: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.eigenvalues)

    def rho_of(self, j: int) -> float:
        if self.below_quarter[j]:
            raise UndefinedRho(
                f"eigenvalue {self.eigenvalues[j]:.6g} is not above 1/4")
        return float(self.rho[j])

    def to_json(self, path, vectors_path=None) -> None:
        """Write eigenvalues and metadata as JSON, vectors as a binary sidecar.

        The sidecar is row-major float64 little-endian, shape recorded in
        the JSON so a reader needs no other context.
        """
        path = Path(path)
        doc = {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "rho": [None if f else float(r) for r, f in zip(self.rho, self.below_quarter)],
            "window": None if self.window is None else {
                "a": self.window.a, "b": self.window.b,
                "a_outer": self.window.a_outer, "b_outer": self.window.b_outer,
            },
            "weight": self.weight,
            "all_eigenvalues": [float(x) for x in self.all_eigenvalues],
            "metadata": self.metadata,
            "vectors": None,
        }
        if vectors_path is not None:
            vectors_path = Path(vectors_path)
            data = np.ascontiguousarray(self.eigenvectors.T, dtype="<f8")
            vectors_path.write_bytes(data.tobytes())
            doc["vectors"] = {
                "file": vectors_path.name,
                "shape": list(data.shape),
                "dtype": "<f8",
                "order": "row-major",
            }
        path.write_text(json.dumps(doc, indent=1))

    @staticmethod
    def from_json(path) -> "SpectralData":
        path = Path(path)
        doc = json.loads(path.read_text())
        lam = np.array(doc["eigenvalues"], dtype=float)
        below = np.array([r is None for r in doc["rho"]], dtype=bool)
        rho = np.array([np.nan if r is None else r for r in doc["rho"]], dtype=float)
        win = doc["window"]
        window = None
        if win is not None:
            window = WindowSpec(win["a"], win["b"], win["a_outer"], win["b_outer"])
        vecs = np.zeros((0, len(lam)))
        if doc["vectors"] is not None:
            meta = doc["vectors"]
            raw = np.frombuffer((path.parent / meta["file"]).read_bytes(), dtype=meta["dtype"])
            vecs = raw.reshape(meta["shape"]).T.copy()
        return SpectralData(
            eigenvalues=lam,
            eigenvectors=vecs,
            rho=rho,
            below_quarter=below,
            window=window,
            weight=float(doc["weight"]),
            all_eigenvalues=np.array(doc["all_eigenvalues"], dtype=float),
            metadata=doc["metadata"],
        )


def solve_window(H: HermitianOperator, window: WindowSpec, weight: float,
                 trusted_fraction: float = TRUSTED_FRACTION) -> SpectralData:
    """All eigenpairs with eigenvalue in the window, measure-orthonormal.

    The window must stay inside the trusted band (the lowest
    trusted_fraction of modes); beyond it the discretization distorts
    eigenvalues and WindowUnreliable is raised.
    """
    if weight <= 0:
        raise ValueError(f"quadrature weight must be positive, got {weight}")
    lam = H.eigenvalues
    n = len(lam)
    n_trust = max(2, int(math.ceil(trusted_fraction * n)))
    trusted_max = lam[min(n_trust, n) - 1]
    if window.b > trusted_max:
        raise WindowUnreliable(
            f"window upper edge {window.b:.6g} exceeds the trusted "
            f"spectrum bound {trusted_max:.6g} (lowest {trusted_fraction:.0%} of modes)")
    mask = (lam >= window.a) & (lam <= window.b)
    vals = lam[mask]
    vecs = H.eigenvectors[:, mask] / math.sqrt(weight)
    below = vals <= 0.25
    rho = np.full(len(vals), np.nan)
    rho[~below] = np.sqrt(vals[~below] - 0.25)
    u0 = H.eigenvectors[:, 0]
    resid0 = float(np.linalg.norm(H.matrix @ u0 - lam[0] * u0))
    return SpectralData(
        eigenvalues=vals,
        eigenvectors=vecs,
        rho=rho,
        below_quarter=below,
        window=window,
        weight=weight,
        all_eigenvalues=lam.copy(),
        metadata={
            "n_modes": n,
            "lambda0": float(lam[0]),
            "lambda0_residual": resid0,
            "trusted_max": float(trusted_max),
            "trusted_fraction": trusted_fraction,
        },
    )


def weyl_density(window) -> float:
    """Limiting eigenvalue count per unit area for the window.

    (1/2 pi) times the integral of tanh(pi r) r over r between the square
    roots of the shifted endpoints; the integrand is smooth so fixed-order
    Gauss-Legendre on the short interval reaches relative error 1e-8.
    """
    if isinstance(window, WindowSpec):
        a, b = window.a, window.b
    else:
        a, b = float(window[0]), float(window[1])
    if not 0.25 < a <= b:
        raise ValueError(f"window needs 1/4 < a <= b, got [{a}, {b}]")
    if a == b:
        return 0.0
    ra, rb = math.sqrt(a - 0.25), math.sqrt(b - 0.25)
    x, w = np.polynomial.legendre.leggauss(96)
    r = 0.5 * (rb - ra) * x + 0.5 * (ra + rb)
    val = 0.5 * (rb - ra) * np.sum(w * np.tanh(math.pi * r) * r)
    return float(val / (2.0 * math.pi))


def counting_lower_bound_check(H0_data: SpectralData, HV_data: SpectralData,
                               window: WindowSpec, c_min: float, c_max: float) -> dict:
    """Compare perturbed and shifted free counting functions on one grid.

    Checks N(H_V, [a, b]) >= N(H_0, [a - min(0, c_min), b - c_max]); the
    min-max sandwich makes this exact in finite dimensions. The shifted
    window must be nonempty, otherwise the hypothesis fails.
    """
    a, b = window.a, window.b
    a_shift = a - min(0.0, c_min)
    b_shift = b - c_max
    if b_shift <= a_shift:
        raise HypothesisViolated(
            f"shifted window [{a_shift:.6g}, {b_shift:.6g}] is empty; "
            f"need b - C_max > a - min(0, C_min)")
    lam_v = HV_data.all_eigenvalues
    lam_0 = H0_data.all_eigenvalues
    n_v = int(np.sum((lam_v >= a) & (lam_v <= b)))
    n_0 = int(np.sum((lam_0 >= a_shift) & (lam_0 <= b_shift)))
    return {
        "count_perturbed": n_v,
        "count_free_shifted": n_0,
        "window": (a, b),
        "shifted_window": (a_shift, b_shift),
        "passed": n_v >= n_0,
    }


def _bump(d: np.ndarray, radius: float) -> np.ndarray:
    """Smooth compactly supported profile, 1 at the center, 0 outside radius."""
    out = np.zeros_like(d)
    inside = d < radius
    q = (d[inside] / radius) ** 2
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - q))
    return out


def center_distances(cover: CoverDescriptor, zs: np.ndarray, sheets: np.ndarray,
                     center: SurfacePoint, reach: float) -> np.ndarray:
    """Quotient distance from each point to one center, exact up to reach.

    Entries can exceed reach or stay inf; those only certify that the true
    distance is larger than reach.
    """
    cover = as_cover(cover)
    ball = _translate_ball(cover, reach)
    zs = np.asarray(zs, dtype=complex)
    best = np.full(len(zs), np.inf)
    c = center.point.z
    for (m, perm), _d0 in zip(ball.elements, ball.distances):
        w = apply_many(m, np.array([c]))[0]
        if perm is not None:
            target = perm[center.sheet]
            mask = sheets == target
        else:
            mask = np.ones(len(zs), dtype=bool)
        if not np.any(mask):
            continue
        diff = np.abs(zs[mask] - w)
        u = (diff * diff) / (2.0 * zs.imag[mask] * w.imag)
        d = 2.0 * np.arcsinh(np.sqrt(0.5 * u))
        best[mask] = np.minimum(best[mask], d)
    return best


def _center_distances(sample: SurfaceSample, center: SurfacePoint, reach: float) -> np.ndarray:
    """Quotient distance from every sample point to one center, inf past reach."""
    return center_distances(sample.cover, sample.base_z, sample.sheets, center, reach)


class Potential:
    """One of the potential families, evaluated on surface samples.

    The recorded c_min and c_max bound the values analytically; the L2
    estimate is Monte Carlo over a sample and carries a standard error.
    """

    def __init__(self, kind: str, params: dict, cover: CoverDescriptor,
                 c_min: float, c_max: float):
        self.kind = kind
        self.params = params
        self.cover = cover
        self.c_min = c_min
        self.c_max = c_max

    def evaluate(self, sample: SurfaceSample) -> np.ndarray:
        if sample.cover.fingerprint() != self.cover.fingerprint():
            raise ValueError("sample comes from a different cover than the potential")
        n = sample.n_points
        p = self.params
        if self.kind == "induced_bump":
            d = _center_distances(sample, p["center"], p["radius"])
            return p["height"] * _bump(d, p["radius"])
        if self.kind == "point_cloud":
            out = np.zeros(n)
            for center in p["centers"]:
                d = _center_distances(sample, center, p["radius"])
                out += p["height"] * _bump(d, p["radius"])
            return out
        if self.kind == "weak_coupling":
            d = _center_distances(sample, p["center"], p["radius"])
            return p["epsilon"] * p["height"] * _bump(d, p["radius"])
        if self.kind == "constant_plus_thin":
            d = _center_distances(sample, p["center"], p["radius"])
            return p["constant"] + p["height"] * _bump(d, p["radius"])
        raise InvalidParams(f"unknown potential kind {self.kind!r}")

    def l2_estimate(self, sample: SurfaceSample) -> tuple[float, float]:
        """Monte Carlo estimate of the squared L2 norm, with standard error."""
        v = self.evaluate(sample)
        vol = sample.volume
        sq = v * v
        est = vol * float(sq.mean())
        stderr = vol * float(sq.std(ddof=1)) / math.sqrt(len(sq))
        return est, stderr

    def summary(self, sample: SurfaceSample) -> dict:
        est, stderr = self.l2_estimate(sample)
        return {
            "kind": self.kind,
            "c_min": self.c_min,
            "c_max": self.c_max,
            "l2_sq_estimate": est,
            "l2_sq_stderr": stderr,
        }


def make_potential(kind: str, params: dict, cover) -> Potential:
    """Validate parameters and build one of the potential families.

    Kinds: induced_bump (one bump through the covering map, supported in a
    single embedded ball), point_cloud (disjoint bumps at sparse centers),
    weak_coupling (epsilon-scaled bump), constant_plus_thin (constant level
    plus one localized term).
    """
    cover = as_cover(cover)
    p = dict(params)

    def need(*names):
        for name in names:
            if name not in p:
                raise InvalidParams(f"{kind} requires parameter {name!r}")

    def check_radius(radius, center):
        if not radius > 0:
            raise InvalidParams(f"bump radius must be positive, got {radius}")
        injrad = injectivity_radius(cover, center.point, center.sheet)
        if radius >= injrad:
            raise InvalidParams(
                f"bump radius {radius} must stay below the injectivity "
                f"radius {injrad:.4f} at the center")

    if kind == "induced_bump":
        need("radius", "height")
        p.setdefault("center", SurfacePoint(BASE_CENTER, 0))
        p["center"] = _as_surface_point(p["center"])
        check_radius(p["radius"], p["center"])
        lo, hi = min(0.0, p["height"]), max(0.0, p["height"])
    elif kind == "point_cloud":
        need("centers", "radius", "height")
        p["centers"] = [_as_surface_point(c) for c in p["centers"]]
        if not p["centers"]:
            raise InvalidParams("point_cloud needs at least one center")
        for center in p["centers"]:
            check_radius(p["radius"], center)
        from .fuchsian import quotient_dist
        centers = p["centers"]
        probe = 2.0 * p["radius"] + 1e-9
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = quotient_dist(cover, centers[i], centers[j], probe)
                if d <= 2.0 * p["radius"]:
                    raise InvalidParams(
                        f"centers {i} and {j} are {d:.4f} apart; need "
                        f"separation above twice the radius {p['radius']}")
        lo, hi = min(0.0, p["height"]), max(0.0, p["height"])
    elif kind == "weak_coupling":
        need("epsilon", "radius", "height")
        if p["epsilon"] < 0:
            raise InvalidParams(f"coupling must be nonnegative, got {p['epsilon']}")
        p.setdefault("center", SurfacePoint(BASE_CENTER, 0))
        p["center"] = _as_surface_point(p["center"])
        check_radius(p["radius"], p["center"])
        swing = p["epsilon"] * p["height"]
        lo, hi = min(0.0, swing), max(0.0, swing)
    elif kind == "constant_plus_thin":
        need("constant", "radius", "height")
        p.setdefault("center", SurfacePoint(BASE_CENTER, 0))
        p["center"] = _as_surface_point(p["center"])
        check_radius(p["radius"], p["center"])
        lo = p["constant"] + min(0.0, p["height"])
        hi = p["constant"] + max(0.0, p["height"])
    else:
        raise InvalidParams(f"unknown potential kind {kind!r}")
    return Potential(kind, p, cover, lo, hi)
