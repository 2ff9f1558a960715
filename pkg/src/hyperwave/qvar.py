"""Quantum variance sums over spectral windows and their upper-bound chain.

Three window statistics drive everything here: the diagonal variance of a
multiplication observable against windowed eigenmodes, the off-diagonal sum
over pairs whose spectral parameters sit in a band around a separation tau,
and the propagator-average majorant that dominates the band sum. A trend
experiment runs the full chain over a family of covers of growing degree and
reports whether the diagonal variance decays.

Conventions fixed throughout: observables are evaluated by one base-domain
formula on every sheet, mean-centered per surface, and scaled to sup norm 1;
pair sums run over ordered pairs; the discrete surface mean uses the uniform
quadrature weight of the sample.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.stats

from .errors import (
    ConfigError,
    DenominatorDegenerate,
    EmptyWindow,
    HyperwaveError,
    UndefinedRho,
)
from .fuchsian import SurfacePoint, as_cover, trivial_cover
from .geometry import HPoint
from .geoflow import ball_indicator, bump_observable
from .kernels import WindowSpec, h
from .opcalc import PropagatorSet, _gauss_legendre, hs_norm, time_avg_conjugation
from .spectral import (
    BASE_AREA,
    SpectralData,
    assemble_operator,
    make_potential,
    sample_surface,
    solve_window,
)

# Scanned band half-widths reported alongside every trend run; there is no
# closed-form rule tying the band width to the window, so the curve over this
# grid is the deliverable.
DELTA_GRID = (0.4, 0.2, 0.1, 0.05)

# Empirical floor for the scalar denominator; below this the majorant is
# meaningless division noise.
GSTAR_FLOOR = 1e-12

DEFAULT_OBSERVABLE = {
    "kind": "bump",
    "center": (-0.4, 1.3),
    "radius": 1.2,
}


@dataclass
class QVarConfig:
    """Window, band, and observable choices for one variance run.

    The outer window of `window` feeds the denominator hypothesis of the
    bound chain; sums themselves only use [a, b]. `points_per_sheet` sets
    the sampling resolution of trend runs.
    """

    window: WindowSpec
    tau: float = 0.5
    delta: float = 0.2
    T: float = 100.0
    observable: dict = field(default_factory=lambda: dict(DEFAULT_OBSERVABLE))
    normalization: str = "sup1_mean0"
    points_per_sheet: int = 600

    def __post_init__(self):
        if not isinstance(self.window, WindowSpec):
            raise ConfigError("window", f"expected a WindowSpec, got {self.window!r}")
        if not self.delta > 0:
            raise ConfigError("delta", f"band half-width must be positive, got {self.delta}")
        if not self.T > 0:
            raise ConfigError("T", f"averaging time must be positive, got {self.T}")
        if self.normalization not in ("sup1_mean0", "none"):
            raise ConfigError("normalization", f"unknown convention {self.normalization!r}")
        if "kind" not in self.observable:
            raise ConfigError("observable", "observable spec needs a 'kind' entry")
        if self.points_per_sheet < 1:
            raise ConfigError("points_per_sheet",
                              f"need at least one point per sheet, got {self.points_per_sheet}")


@dataclass
class QVarReport:
    """Variance sums and the bound-chain majorant for one cover run."""

    degree: int
    genus: int
    count: int
    sum1: float
    sum2: float
    sum3: float
    majorant: float
    tau: float
    delta: float
    T: float
    potential_kind: str
    seed: int
    normalization: str
    pair_detail: list | None = None
    metadata: dict = field(default_factory=dict)


def _as_point(center) -> SurfacePoint:
    if isinstance(center, SurfacePoint):
        return center
    if isinstance(center, HPoint):
        return SurfacePoint(center, 0)
    x, y = center
    return SurfacePoint(HPoint(float(x), float(y)), 0)


def build_observable(cover, sample, spec: dict, normalization: str = "sup1_mean0") -> np.ndarray:
    """Evaluate an observable spec on a sample, one base formula per sheet.

    The function of the base point is applied on every sheet unchanged, so
    the result is invariant under deck transformations; mean-centering then
    uses the sample's uniform weight. A constant observable centers to the
    zero vector, which is returned unscaled.
    """
    cover = as_cover(cover)
    kind = spec["kind"]
    base = trivial_cover(cover.base)
    zero_sheets = np.zeros(sample.n_points, dtype=np.int64)
    if kind == "bump":
        obs = bump_observable(base, _as_point(spec["center"]), spec["radius"])
        a = obs(sample.base_z, zero_sheets)
    elif kind == "ball":
        obs = ball_indicator(base, _as_point(spec["center"]), spec["radius"])
        a = obs(sample.base_z, zero_sheets)
    elif kind == "constant":
        a = np.full(sample.n_points, float(spec.get("value", 1.0)))
    else:
        raise ConfigError("observable", f"unknown observable kind {kind!r}")
    if normalization == "none":
        return a
    a = a - a.mean()
    peak = np.max(np.abs(a))
    if peak > 0:
        a = a / peak
    return a


def _window_bounds(I) -> tuple[float, float]:
    if isinstance(I, WindowSpec):
        return I.a, I.b
    lo, hi = I
    return float(lo), float(hi)


def _select(S: SpectralData, I) -> np.ndarray:
    lo, hi = _window_bounds(I)
    if S.window is not None and (lo < S.window.a or hi > S.window.b):
        raise ValueError(
            f"window [{lo}, {hi}] reaches outside the solved band "
            f"[{S.window.a}, {S.window.b}]")
    sel = np.where((S.eigenvalues >= lo) & (S.eigenvalues <= hi))[0]
    if len(sel) == 0:
        raise EmptyWindow(f"no eigenvalues in [{lo}, {hi}]")
    return sel


def _pair_matrix(S: SpectralData, a: np.ndarray, sel: np.ndarray) -> np.ndarray:
    """Matrix of <a psi_j, psi_k> under the discrete measure, windowed."""
    V = S.eigenvectors[:, sel]
    return S.weight * (V.T @ (a[:, None] * V))


def diagonal_variance(S: SpectralData, a, I) -> float:
    """Mean squared centered diagonal element over the window.

    (1/N) sum over eigenvalues in I of |<a psi_j, psi_j> - abar|^2 with abar
    the discrete surface mean of a.
    """
    a = np.asarray(a, dtype=float)
    sel = _select(S, I)
    A = _pair_matrix(S, a, sel)
    d = np.diag(A) - float(a.mean())
    return float(np.mean(d * d))


def offdiag_variance(S: SpectralData, a, I, tau: float, delta: float) -> float:
    """Band-restricted off-diagonal sum, ordered pairs, normalized by N.

    The band keeps ordered pairs j != k with |rho_j - rho_k - tau| < delta;
    tau = 0 gives the near-diagonal sum.
    """
    if not delta > 0:
        raise ValueError(f"band half-width must be positive, got {delta}")
    a = np.asarray(a, dtype=float)
    sel = _select(S, I)
    if np.any(S.below_quarter[sel]):
        bad = S.eigenvalues[sel][S.below_quarter[sel]]
        raise UndefinedRho(
            f"window holds eigenvalues at or below 1/4: {bad}")
    A = _pair_matrix(S, a, sel)
    rho = S.rho[sel]
    band = np.abs(rho[:, None] - rho[None, :] - tau) < delta
    band &= ~np.eye(len(sel), dtype=bool)
    return float(np.sum(A[band] ** 2)) / len(sel)


def windowed_mass_check(S: SpectralData, a, I) -> tuple[float, float]:
    """Submatrix Frobenius mass against its quadrature ceiling.

    Returns (lhs, rhs) with lhs = sum of all squared centered-diagonal and
    off-diagonal elements over the window and rhs = sum of a^2 times the
    quadrature weight. The inequality lhs <= rhs needs the window to hold
    fewer modes than the surface volume; the standard window respects that.
    """
    a = np.asarray(a, dtype=float)
    sel = _select(S, I)
    A = _pair_matrix(S, a, sel)
    d = np.diag(A) - float(a.mean())
    off = A[~np.eye(len(sel), dtype=bool)]
    lhs = float(np.sum(d * d) + np.sum(off ** 2))
    rhs = S.weight * float(np.sum(a * a))
    return lhs, rhs


def band_decomposition_check(S: SpectralData, a, I, delta: float) -> dict:
    """Tile the pair set by tau-bands and compare against the full sum.

    Bands centered at 2 m delta tile the range of pair separations up to
    measure-zero boundaries; the banded total must reproduce the full
    off-diagonal sum.
    """
    sel = _select(S, I)
    rho = S.rho[sel]
    diameter = float(rho.max() - rho.min())
    m_max = int(math.ceil((diameter + delta) / (2.0 * delta))) + 1
    total = 0.0
    for m in range(-m_max, m_max + 1):
        total += offdiag_variance(S, a, I, 2.0 * m * delta, delta)
    full = offdiag_variance(S, a, I, 0.0, diameter + delta)
    return {"banded_total": total, "full": full, "residual": abs(total - full)}


def bound_chain_check(S: SpectralData, P: PropagatorSet, a, cfg: QVarConfig) -> dict:
    """Band sum against the propagator-average majorant on the same data.

    The majorant divides the squared HS norm of the time-averaged conjugated
    observable by the squared smallest scalar denominator measured over the
    band; the scalar averages reuse the exact quadrature rule of the matrix
    average, so the domination is an algebraic identity up to rounding. The
    band here includes diagonal pairs, which is what makes a one-eigenvalue
    window reduce to the scalar identity.
    """
    a = np.asarray(a, dtype=float)
    a = a - a.mean()
    win = cfg.window
    a_outer, _ = win.outer()
    hyp = (2.0 / 9.0) * math.sqrt(a_outer - 0.25)
    if cfg.delta >= hyp:
        raise DenominatorDegenerate(
            f"band half-width {cfg.delta} is not below the resonance "
            f"hypothesis bound {hyp:.6f} for outer edge {a_outer}")

    lam = P.HV.eigenvalues
    sel = np.where((lam >= win.a) & (lam <= win.b))[0]
    if len(sel) == 0:
        raise EmptyWindow(f"no eigenvalues in [{win.a}, {win.b}]")
    lam_s = lam[sel]
    if np.max(np.abs(np.sort(lam_s) - np.sort(S.eigenvalues))) > 1e-8:
        raise ValueError("spectral data and propagator set disagree on the "
                         "windowed eigenvalues; they come from different operators")
    if np.any(lam_s <= 0.25):
        raise UndefinedRho(f"window holds eigenvalues at or below 1/4: {lam_s[lam_s <= 0.25]}")

    M = time_avg_conjugation(P, a, win, cfg.T, cfg.tau)
    hs = hs_norm(M)

    nodes, weights = _gauss_legendre(0.0, cfg.T, P.quad_order)
    C = np.zeros((len(sel), len(sel)))
    for t, w in zip(nodes, weights):
        hv = h(t, lam_s)
        C += (w * math.cos(cfg.tau * t)) * np.outer(hv, hv)
    C /= cfg.T

    rho = np.sqrt(lam_s - 0.25)
    band = np.abs(rho[:, None] - rho[None, :] - cfg.tau) < cfg.delta
    pairs = int(band.sum())
    V = P.HV.eigenvectors[:, sel]
    A = V.T @ (a[:, None] * V)
    if pairs == 0:
        return {"sum": 0.0, "majorant": 0.0, "ratio": 0.0, "gstar": float("nan"),
                "pairs": 0, "hs_norm": hs, "count": len(sel),
                "tau": cfg.tau, "delta": cfg.delta, "T": cfg.T}
    gstar = float(np.min(np.abs(C[band])))
    if gstar <= GSTAR_FLOOR:
        raise DenominatorDegenerate(
            f"smallest scalar denominator {gstar:.3e} over the band sits at "
            f"the floor {GSTAR_FLOOR:g}")
    band_sum = float(np.sum(A[band] ** 2))
    majorant = (hs / gstar) ** 2
    if band_sum > majorant * (1.0 + 1e-6):
        raise HyperwaveError(
            f"band sum {band_sum:.6e} exceeds its majorant {majorant:.6e}; "
            "the averaging chain is inconsistent")
    return {"sum": band_sum, "majorant": majorant,
            "ratio": band_sum / majorant if majorant > 0 else 0.0,
            "gstar": gstar, "pairs": pairs, "hs_norm": hs, "count": len(sel),
            "tau": cfg.tau, "delta": cfg.delta, "T": cfg.T}


def _genus(degree: int) -> int:
    # unramified cover of the genus-2 base
    return degree + 1


def trend_experiment(covers, potential_spec: dict, cfg: QVarConfig,
                     seed: int = 0) -> list[QVarReport]:
    """Run the variance chain over a cover family and report per cover.

    Each cover gets its own sample seeded seed + index, the induced
    potential, a windowed eigensolve, the three variance sums, the bound
    chain, and the ceiling and band-decomposition checks recorded in
    metadata. The family statistic (Spearman correlation of diagonal
    variance against degree) lands in every report's metadata.
    """
    covers = [as_cover(c) for c in covers]
    if len(covers) < 3:
        raise ValueError(f"need at least three covers, got {len(covers)}")
    degrees = [c.degree for c in covers]
    if any(d2 < d1 for d1, d2 in zip(degrees, degrees[1:])):
        raise ValueError(f"cover degrees must not decrease, got {degrees}")
    pot_params = {k: v for k, v in potential_spec.items() if k != "kind"}
    pot_kind = potential_spec["kind"]

    reports = []
    pps = cfg.points_per_sheet
    eps = 0.25 * math.sqrt(BASE_AREA / pps)
    for index, cover in enumerate(covers):
        run_seed = seed + index
        sample = sample_surface(cover, pps, seed=run_seed, eps=eps)
        potential = make_potential(pot_kind, pot_params, cover)
        v = potential.evaluate(sample)
        H0 = assemble_operator(sample, None, eps)
        HV = assemble_operator(sample, v, eps)
        S = solve_window(HV, cfg.window, sample.weight)
        a = build_observable(cover, sample, cfg.observable, cfg.normalization)

        sum1 = diagonal_variance(S, a, cfg.window)
        sum2 = offdiag_variance(S, a, cfg.window, 0.0, cfg.delta)
        sum3 = offdiag_variance(S, a, cfg.window, cfg.tau, cfg.delta)
        chain = bound_chain_check(S, PropagatorSet(H0, v), a, cfg)
        lhs, rhs = windowed_mass_check(S, a, cfg.window)
        bands = band_decomposition_check(S, a, cfg.window, cfg.delta)
        scan = {str(d): offdiag_variance(S, a, cfg.window, cfg.tau, d)
                for d in DELTA_GRID}
        reports.append(QVarReport(
            degree=cover.degree,
            genus=_genus(cover.degree),
            count=S.count,
            sum1=sum1,
            sum2=sum2,
            sum3=sum3,
            majorant=chain["majorant"],
            tau=cfg.tau,
            delta=cfg.delta,
            T=cfg.T,
            potential_kind=pot_kind,
            seed=run_seed,
            normalization=cfg.normalization,
            metadata={
                "points_per_sheet": pps,
                "bound_chain": chain,
                "mass_lhs": lhs,
                "mass_rhs": rhs,
                "band_residual": bands["residual"],
                "delta_scan": scan,
                "trusted_fraction": S.metadata.get("trusted_fraction"),
            },
        ))
    statistic = trend_statistic(reports)
    for report in reports:
        report.metadata["spearman"] = statistic
    return reports


def trend_statistic(reports) -> float:
    """Spearman correlation of diagonal variance against cover degree.

    Equal degrees throughout give an undefined (nan) statistic; that is the
    expected outcome of a repeated-run calibration.
    """
    degrees = [r.degree for r in reports]
    sums = [r.sum1 for r in reports]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.stats.ConstantInputWarning)
        value = scipy.stats.spearmanr(degrees, sums).statistic
    return float(value)


CSV_COLUMNS = ["degree", "genus", "N", "sum1", "sum2", "sum3", "tau", "delta",
               "T", "potential_kind", "seed"]


def write_qvar_csv(path, reports) -> None:
    """Write one row per report with a fixed column order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow([
                r.degree,
                r.genus,
                r.count,
                repr(float(r.sum1)),
                repr(float(r.sum2)),
                repr(float(r.sum3)),
                repr(float(r.tau)),
                repr(float(r.delta)),
                repr(float(r.T)),
                r.potential_kind,
                r.seed,
            ])


def write_qvar_json(path, reports) -> None:
    """Full reports, metadata included, as a JSON list."""
    path = Path(path)
    payload = []
    for r in reports:
        entry = {
            "degree": r.degree,
            "genus": r.genus,
            "N": r.count,
            "sum1": r.sum1,
            "sum2": r.sum2,
            "sum3": r.sum3,
            "majorant": r.majorant,
            "tau": r.tau,
            "delta": r.delta,
            "T": r.T,
            "potential_kind": r.potential_kind,
            "seed": r.seed,
            "normalization": r.normalization,
            "metadata": r.metadata,
        }
        payload.append(entry)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
