"""Geodesic flow on the unit tangent bundle and correlation-decay measurement.

A unit tangent vector is carried as the isometry taking the upward vector
at i to it, so flowing by time t is right multiplication by the diagonal
matrix with entries e^(t/2), e^(-t/2). After each bounded step the frame
is pulled back over the deck group so its base point stays in the
fundamental domain, with the sheet index tracking which copy the point
belongs to. Correlations of position observables are estimated by Monte
Carlo over the invariant measure (area-uniform base point, uniform sheet,
uniform direction) and compared against an exponential decay envelope
whose rate comes from the bottom of the perturbed spectrum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapExceeded, HyperwaveError
from .fuchsian import CoverDescriptor, SurfacePoint, as_cover, sample_domain
from .geometry import Moebius, tangent_of
from .spectral import BASE_CENTER, _bump, center_distances

STEP_CAP = 1.0
TOTAL_CAP = 20.0
TWO_RHO_MARGIN = 1e-6
REDUCE_MAX_ITER = 200
STALL_TOL = 1e-13


def beta(lam: float) -> float:
    """Decay exponent as a function of the spectral bottom.

    1 - sqrt(1 - 4 lam) below the threshold 1/4, capped at 1 above it;
    continuous across the threshold.
    """
    if lam < 0:
        raise ValueError(f"eigenvalue must be nonnegative, got {lam}")
    if lam > 0.25:
        return 1.0
    return 1.0 - math.sqrt(1.0 - 4.0 * lam)


@dataclass(frozen=True)
class FlowState:
    """Unit tangent vector on a cover: frame in PSL(2, R) plus sheet index."""

    frame: Moebius
    sheet: int = 0

    def tangent(self):
        return tangent_of(self.frame)


@dataclass(frozen=True)
class MixingParams:
    """Decay envelope parameters derived from a spectral-bottom estimate."""

    lam1: float
    times: tuple = ()
    beta: float = field(init=False)
    prefactor: float = field(init=False)

    def __post_init__(self):
        if self.lam1 <= 0:
            raise ValueError(
                f"need a positive bottom eigenvalue for a decaying envelope, got {self.lam1}")
        b = beta(self.lam1)
        object.__setattr__(self, "beta", b)
        object.__setattr__(self, "prefactor", 11.0 * math.exp(b))
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))

    def bound(self, t: float) -> float:
        """Envelope value 11 e^beta (1 + t) e^(-beta t), without observable norms."""
        return self.prefactor * (1.0 + t) * math.exp(-self.beta * t)


class _StepCache:
    """Deck transformations short enough to pull any nearby point home."""

    def __init__(self, cover: CoverDescriptor):
        from .fuchsian import domain_circumradius, enumerate_ball
        rho = domain_circumradius(cover.base)
        ball = enumerate_ball(cover, BASE_CENTER, BASE_CENTER,
                              2.0 * rho + TWO_RHO_MARGIN)
        mats = []
        perms = []
        for (m, perm), d0 in zip(ball.elements, ball.distances):
            if d0 <= 1e-12:
                continue
            mats.append(m.array())
            perms.append(perm if perm is not None else (0,))
        if not mats:
            raise HyperwaveError("no deck transformations found for reduction")
        self.mats = np.stack(mats)
        self.perms = np.array(perms, dtype=np.int64)
        self.rho = rho


_step_caches: dict[str, _StepCache] = {}


def _get_cache(cover: CoverDescriptor) -> _StepCache:
    key = cover.fingerprint()
    if key not in _step_caches:
        _step_caches[key] = _StepCache(cover)
    return _step_caches[key]


def _base_points(frames: np.ndarray) -> np.ndarray:
    """Image of i under each frame, as complex numbers."""
    num = frames[:, 0, 1] + 1j * frames[:, 0, 0]
    den = frames[:, 1, 1] + 1j * frames[:, 1, 0]
    return num / den


def _angles(frames: np.ndarray) -> np.ndarray:
    """Direction angle at the base point of each frame (pi/2 is up)."""
    raw = 0.5 * math.pi - 2.0 * np.arctan2(frames[:, 1, 0], frames[:, 1, 1])
    return np.mod(raw, 2.0 * math.pi)


def _cosh_gap(z: np.ndarray) -> np.ndarray:
    """cosh of the distance to i, minus one."""
    return (z.real * z.real + (z.imag - 1.0) ** 2) / (2.0 * z.imag)


def _renormalize(frames: np.ndarray) -> None:
    det = frames[:, 0, 0] * frames[:, 1, 1] - frames[:, 0, 1] * frames[:, 1, 0]
    frames /= np.sqrt(det)[:, None, None]


def _reduce_frames(frames: np.ndarray, sheets: np.ndarray, cache: _StepCache) -> None:
    """Pull every frame's base point into the fundamental domain, in place."""
    z = _base_points(frames)
    gap = _cosh_gap(z)
    k = len(cache.mats)
    a = cache.mats[:, 0, 0]
    b = cache.mats[:, 0, 1]
    c = cache.mats[:, 1, 0]
    d = cache.mats[:, 1, 1]
    for _ in range(REDUCE_MAX_ITER):
        best_gap = gap.copy()
        best_idx = np.full(len(z), -1, dtype=np.int64)
        for j in range(k):
            zj = (a[j] * z + b[j]) / (c[j] * z + d[j])
            gj = _cosh_gap(zj)
            better = gj < best_gap
            best_gap[better] = gj[better]
            best_idx[better] = j
        move = best_gap < gap - STALL_TOL * (1.0 + gap)
        if not np.any(move):
            return
        idx = best_idx[move]
        frames[move] = np.einsum("nij,njk->nik", cache.mats[idx], frames[move])
        sheets[move] = cache.perms[idx, sheets[move]]
        z[move] = _base_points(frames[move])
        gap[move] = _cosh_gap(z[move])
    raise HyperwaveError("domain reduction did not terminate")


def _flow_frames(frames: np.ndarray, sheets: np.ndarray, t: float,
                 cache: _StepCache, step_cap: float = STEP_CAP) -> None:
    """Flow all frames by t, reducing after every bounded step, in place."""
    remaining = float(t)
    while remaining != 0.0:
        dt = max(-step_cap, min(step_cap, remaining))
        u = math.exp(0.5 * dt)
        frames[:, :, 0] *= u
        frames[:, :, 1] /= u
        _reduce_frames(frames, sheets, cache)
        _renormalize(frames)
        remaining -= dt


def flow(state: FlowState, t: float, cover, step_cap: float = STEP_CAP) -> FlowState:
    """Flow one state by a bounded time and reduce it back to the domain.

    Single calls are capped; longer trajectories are produced by composing
    steps, which commutes with reduction because pullback elements compose.
    """
    if abs(t) > step_cap:
        raise CapExceeded(f"flow step {t} exceeds the cap {step_cap}; compose shorter steps")
    cover = as_cover(cover)
    cache = _get_cache(cover)
    frames = state.frame.array()[None, :, :].copy()
    sheets = np.array([state.sheet], dtype=np.int64)
    if t != 0.0:
        u = math.exp(0.5 * t)
        frames[:, :, 0] *= u
        frames[:, :, 1] /= u
    _reduce_frames(frames, sheets, cache)
    _renormalize(frames)
    return FlowState(Moebius.from_array(frames[0]), int(sheets[0]))


def flow_ensemble(cover, frames: np.ndarray, sheets: np.ndarray, t: float,
                  total_cap: float = TOTAL_CAP) -> tuple[np.ndarray, np.ndarray]:
    """Flow an array of frames by t and reduce each back to the domain.

    Returns fresh (frames, sheets) arrays; the inputs are left alone.
    """
    if abs(t) > total_cap:
        raise CapExceeded(f"flow time {t} exceeds the total cap {total_cap}")
    cover = as_cover(cover)
    cache = _get_cache(cover)
    frames = np.array(frames, dtype=float)
    sheets = np.array(sheets, dtype=np.int64)
    if t != 0.0:
        _flow_frames(frames, sheets, t, cache)
    return frames, sheets


def ensemble_positions(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Base points (complex) and direction angles of an array of frames."""
    return _base_points(frames), _angles(frames)


def liouville_states(cover, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sample frames and sheets from the invariant measure of the flow.

    Base point area-uniform in the domain, sheet uniform, direction uniform.
    Returns (frames, sheets) as arrays.
    """
    cover = as_cover(cover)
    if n < 2:
        raise ValueError(f"need at least two samples, got {n}")
    rng = np.random.default_rng(seed)
    z = sample_domain(cover.base, n, rng)
    sheets = rng.integers(0, cover.degree, size=n).astype(np.int64)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    phi = 0.5 * (theta - 0.5 * math.pi)
    cphi = np.cos(phi)
    sphi = np.sin(phi)
    sq = np.sqrt(z.imag)
    xo = z.real / sq
    frames = np.empty((n, 2, 2))
    frames[:, 0, 0] = sq * cphi - xo * sphi
    frames[:, 0, 1] = sq * sphi + xo * cphi
    frames[:, 1, 0] = -sphi / sq
    frames[:, 1, 1] = cphi / sq
    return frames, sheets


def ball_indicator(cover, center: SurfacePoint, radius: float):
    """Observable 1 on the metric ball around center, 0 outside."""
    cover = as_cover(cover)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")

    def obs(z, sheets, angles=None):
        d = center_distances(cover, z, sheets, center, radius)
        return (d <= radius).astype(float)

    return obs


def bump_observable(cover, center: SurfacePoint, radius: float):
    """Smooth compactly supported observable, 1 at the center."""
    cover = as_cover(cover)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")

    def obs(z, sheets, angles=None):
        d = center_distances(cover, z, sheets, center, radius)
        return _bump(np.where(np.isfinite(d), d, 2.0 * radius), radius)

    return obs


def _covariance(F: np.ndarray, G: np.ndarray) -> tuple[float, float]:
    n = len(F)
    h = (F - F.mean()) * (G - G.mean())
    est = float(h.sum() / (n - 1))
    stderr = float(h.std(ddof=1) / math.sqrt(n))
    return est, stderr


def correlation(cover, f, g, t: float, n_samples: int, seed: int,
                total_cap: float = TOTAL_CAP) -> tuple[float, float]:
    """Centered correlation of g now against f after flowing by t.

    Monte Carlo over the invariant measure; deterministic per seed. The
    estimate is the sample covariance of f at the flowed point with g at
    the starting point, and the error is the standard error of the mean
    of the centered products.
    """
    if abs(t) > total_cap:
        raise CapExceeded(f"flow time {t} exceeds the total cap {total_cap}")
    cover = as_cover(cover)
    cache = _get_cache(cover)
    frames, sheets = liouville_states(cover, n_samples, seed)
    G = np.asarray(g(_base_points(frames), sheets, _angles(frames)), dtype=float)
    if t != 0.0:
        _flow_frames(frames, sheets, t, cache)
    F = np.asarray(f(_base_points(frames), sheets, _angles(frames)), dtype=float)
    return _covariance(F, G)


def correlation_curve(cover, f, g, times, n_samples: int, seed: int,
                      params: MixingParams | None = None,
                      total_cap: float = TOTAL_CAP) -> list[dict]:
    """Correlation rows over an increasing time grid, one shared sample stream.

    Each row carries the estimate, its standard error, the decay envelope
    scaled by the Monte Carlo observable norms (when params are given),
    and whether the envelope still resolves above the noise floor.
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times) or times != sorted(times):
        raise ValueError("time grid must be nonnegative and ascending")
    if times and times[-1] > total_cap:
        raise CapExceeded(f"final time {times[-1]} exceeds the total cap {total_cap}")
    cover = as_cover(cover)
    cache = _get_cache(cover)
    frames, sheets = liouville_states(cover, n_samples, seed)
    z0 = _base_points(frames)
    th0 = _angles(frames)
    G = np.asarray(g(z0, sheets, th0), dtype=float)
    norm_g = math.sqrt(float(np.mean(G * G)))
    F0 = np.asarray(f(z0, sheets, th0), dtype=float)
    norm_f = math.sqrt(float(np.mean(F0 * F0)))
    rows = []
    now = 0.0
    for t in times:
        if t > now:
            _flow_frames(frames, sheets, t - now, cache)
            now = t
        F = np.asarray(f(_base_points(frames), sheets, _angles(frames)), dtype=float)
        est, stderr = _covariance(F, G)
        if params is not None:
            bound = params.bound(t) * norm_f * norm_g
            resolved = bool(bound >= 3.0 * stderr)
        else:
            bound = math.nan
            resolved = False
        rows.append({
            "t": t,
            "estimate": est,
            "stderr": stderr,
            "bound": bound,
            "resolved": resolved,
        })
    return rows


def write_decay_csv(path, rows) -> None:
    """Write correlation rows as CSV with a fixed column order."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "estimate", "stderr", "bound", "resolved"])
        for row in rows:
            writer.writerow([
                repr(float(row["t"])),
                repr(float(row["estimate"])),
                repr(float(row["stderr"])),
                repr(float(row["bound"])),
                "true" if row["resolved"] else "false",
            ])


def fit_decay_rate(rows) -> float:
    """Least-squares slope of log|estimate| against t.

    Only rows whose estimate stands at least three standard errors away
    from zero enter the fit; the rest sit at the Monte Carlo noise floor
    and carry no decay information. Raises when fewer than two rows
    qualify.
    """
    kept = [r for r in rows if abs(r["estimate"]) > 3.0 * r["stderr"]]
    if len(kept) < 2:
        raise ValueError("need at least two rows with resolvable estimates to fit a rate")
    ts = np.asarray([r["t"] for r in kept])
    ys = np.asarray([math.log(abs(r["estimate"])) for r in kept])
    slope, _ = np.polyfit(ts, ys, 1)
    return float(slope)
