"""Finite-dimensional operator calculus for wave propagators.

Everything here acts on dense symmetric matrices through their
eigendecompositions: sine and cosine propagators of a Schrodinger pair
(H0, H0 + V), the Duhamel correction connecting them, spectral window
projectors, Hilbert-Schmidt norms, and the window-restricted time average
that turns a multiplication operator back into its matrix elements. The
matrices are small enough (a few hundred rows) that exact dense calculus
beats any iterative scheme, and that is the point: these are the oracles
the surface discretization is checked against.

The propagator multiplier is h(t, lam) = sin(t sqrt(lam - 1/4))/sqrt(...)
from the kernels module; its time derivative is the cosine multiplier
cos(t sqrt(lam - 1/4)), and the pair satisfies

    d/dt P(t) = S(t),   d/dt S(t) = -(H - 1/4) P(t),
    S(t)^2 + (H - 1/4) P(t)^2 = 1.

Both derivative relations use the shifted operator H - 1/4; the unshifted
form would break the energy identity off the branch point.
"""

from __future__ import annotations

import math
import warnings
from functools import cached_property

import numpy as np

from .errors import HyperwaveError, WindowEdgeWarning
from .kernels import WindowSpec, h

EDGE_TOL = 1e-9
SYMMETRY_TOL = 1e-12
SHIFT_CHECK_TOL = 1e-8


def _cos_multiplier(t: float, lam):
    """cos(t sqrt(lam - 1/4)), continued as cosh below the branch point."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    scalar = np.ndim(lam) == 0
    arr = np.atleast_1d(np.asarray(lam, dtype=float))
    q = arr - 0.25
    out = np.empty_like(q)
    near = np.abs(q) < 1e-8
    if np.any(near):
        qq = q[near]
        out[near] = 1.0 - t * t * qq / 2.0 + t**4 * qq * qq / 24.0
    above = ~near & (q > 0)
    if np.any(above):
        out[above] = np.cos(t * np.sqrt(q[above]))
    below = ~near & (q < 0)
    if np.any(below):
        out[below] = np.cosh(t * np.sqrt(-q[below]))
    return float(out[0]) if scalar else out


class HermitianOperator:
    """Dense real symmetric matrix with a cached eigendecomposition.

    The input is symmetrized on construction; eigenvalues come back
    ascending with orthonormal eigenvectors as columns.
    """

    def __init__(self, matrix):
        mat = np.asarray(matrix, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError(f"need a square matrix, got shape {mat.shape}")
        self.matrix = 0.5 * (mat + mat.T)
        self.n = mat.shape[0]

    @cached_property
    def _eig(self) -> tuple[np.ndarray, np.ndarray]:
        lam, vecs = np.linalg.eigh(self.matrix)
        return lam, vecs

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eig[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self._eig[1]

    def apply_function(self, fvals) -> np.ndarray:
        """U diag(fvals) U^T for per-eigenvalue function values fvals."""
        lam, vecs = self._eig
        fv = np.asarray(fvals, dtype=float)
        if fv.shape != lam.shape:
            raise ValueError(f"need {lam.shape[0]} function values, got {fv.shape}")
        return (vecs * fv) @ vecs.T


class PropagatorSet:
    """A free/perturbed operator pair H0 and HV = H0 + diag(V).

    V is a real vector acting by multiplication. The construction checks
    the additive-perturbation shift bounds: every eigenvalue of HV must
    lie in [min eig H0 + min V, max eig H0 + max V].
    """

    def __init__(self, H0, V, time_grid=None, quad_order: int = 32):
        if not isinstance(H0, HermitianOperator):
            H0 = HermitianOperator(H0)
        self.H0 = H0
        self.V = np.asarray(V, dtype=float)
        if self.V.shape != (H0.n,):
            raise ValueError(f"potential must be a length-{H0.n} vector, got shape {self.V.shape}")
        self.HV = HermitianOperator(H0.matrix + np.diag(self.V))
        if quad_order < 1:
            raise ValueError(f"quadrature order must be positive, got {quad_order}")
        self.quad_order = int(quad_order)
        self.time_grid = None if time_grid is None else np.asarray(time_grid, dtype=float)

        lo = self.H0.eigenvalues[0] + self.V.min()
        hi = self.H0.eigenvalues[-1] + self.V.max()
        ev = self.HV.eigenvalues
        if ev[0] < lo - SHIFT_CHECK_TOL or ev[-1] > hi + SHIFT_CHECK_TOL:
            raise HyperwaveError(
                f"perturbed spectrum [{ev[0]:.6g}, {ev[-1]:.6g}] escapes the "
                f"shift bounds [{lo:.6g}, {hi:.6g}]")

    def operator(self, which: str) -> HermitianOperator:
        if which == "free":
            return self.H0
        if which == "potential":
            return self.HV
        raise ValueError(f"which must be 'free' or 'potential', got {which!r}")


def propagate(P: PropagatorSet, which: str, t: float) -> np.ndarray:
    """Sine propagator h(t, H) of the chosen operator at time t >= 0."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    H = P.operator(which)
    return H.apply_function(h(t, H.eigenvalues))


def cosine_propagate(P: PropagatorSet, which: str, t: float) -> np.ndarray:
    """Cosine propagator cos(t sqrt(H - 1/4)), the time derivative of propagate."""
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    H = P.operator(which)
    return H.apply_function(_cos_multiplier(t, H.eigenvalues))


def _gauss_legendre(a: float, b: float, order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def duhamel_Q(P: PropagatorSet, t: float, quad_order: int) -> np.ndarray:
    """Duhamel correction Q(t) = int_0^t P_V(t1) V P_0(t - t1) dt1.

    Gauss-Legendre in t1; the integrand is entire in t1 so the error
    decays spectrally in quad_order. The identity P_V = P_0 - Q ties the
    perturbed propagator to the free one.
    """
    if t < 0:
        raise ValueError(f"time must be nonnegative, got {t}")
    if quad_order < 8:
        raise ValueError(f"quadrature order must be at least 8, got {quad_order}")
    n = P.H0.n
    Q = np.zeros((n, n))
    if t == 0 or not np.any(P.V):
        return Q
    nodes, weights = _gauss_legendre(0.0, t, quad_order)
    lam_v = P.HV.eigenvalues
    lam_0 = P.H0.eigenvalues
    for t1, w in zip(nodes, weights):
        left = P.HV.apply_function(h(t1, lam_v))
        right = P.H0.apply_function(h(t - t1, lam_0))
        Q += w * (left * P.V) @ right
    return Q


def spectral_projector(H: HermitianOperator, window: WindowSpec) -> np.ndarray:
    """Orthogonal projector onto eigenvectors with eigenvalue in [a, b].

    Eigenvalues within EDGE_TOL of an endpoint trigger a WindowEdgeWarning;
    membership itself is decided by the closed interval.
    """
    lam = H.eigenvalues
    near_edge = np.minimum(np.abs(lam - window.a), np.abs(lam - window.b)) < EDGE_TOL
    if np.any(near_edge):
        vals = ", ".join(f"{x:.12g}" for x in lam[near_edge])
        warnings.warn(f"eigenvalues near a window edge: {vals}", WindowEdgeWarning,
                      stacklevel=2)
    mask = (lam >= window.a) & (lam <= window.b)
    vecs = H.eigenvectors[:, mask]
    return vecs @ vecs.T


def hs_norm(M) -> float:
    """Hilbert-Schmidt (Frobenius) norm."""
    return float(np.linalg.norm(np.asarray(M, dtype=float)))


def time_avg_conjugation(P: PropagatorSet, a, window: WindowSpec, T: float,
                         tau: float = 0.0, quad_order: int | None = None) -> np.ndarray:
    """Window-restricted propagator average of a multiplication operator.

    Returns (1/T) int_0^T Pi cos(tau t) h(t, HV) a h(t, HV) Pi dt where Pi
    projects onto the HV eigenvalues inside the window. In the eigenbasis
    the (j, k) entry is <a psi_j, psi_k> times the scalar average
    (1/T) int_0^T cos(tau t) h(t, lam_j) h(t, lam_k) dt, so dividing by
    that average recovers the matrix element of a; the whole average is
    assembled that way from one Gauss-Legendre rule on [0, T].
    """
    if T <= 0:
        raise ValueError(f"averaging horizon must be positive, got {T}")
    order = P.quad_order if quad_order is None else int(quad_order)
    if order < 1:
        raise ValueError(f"quadrature order must be positive, got {order}")
    a = np.asarray(a, dtype=float)
    n = P.HV.n
    if a.shape != (n,):
        raise ValueError(f"observable must be a length-{n} vector, got shape {a.shape}")
    lam = P.HV.eigenvalues
    vecs = P.HV.eigenvectors
    mask = (lam >= window.a) & (lam <= window.b)
    if not np.any(mask):
        return np.zeros((n, n))

    a_eig = vecs.T @ (a[:, None] * vecs)
    nodes, weights = _gauss_legendre(0.0, T, order)
    C = np.zeros((n, n))
    for t, w in zip(nodes, weights):
        hv = h(t, lam)
        C += (w * math.cos(tau * t)) * np.outer(hv, hv)
    C /= T
    mid = np.where(mask[:, None] & mask[None, :], a_eig * C, 0.0)
    return vecs @ mid @ vecs.T
