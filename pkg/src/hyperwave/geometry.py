"""Upper half-plane hyperbolic geometry: points, isometries, polar coordinates.

Distances use the chord identity cosh d = 1 + |z-w|^2 / (2 Im z Im w),
evaluated in the numerically stable form d = 2 asinh(|z-w| / (2 sqrt(Im z Im w)))
which is accurate for both tiny and large separations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SIGN_EPS = 1e-12
DET_DRIFT = 1e-12

TWO_PI = 2.0 * math.pi


def _wrap_angle(a: float) -> float:
    """Reduce an angle to [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    return a + TWO_PI if a < 0 else a


@dataclass(frozen=True)
class HPoint:
    """Point x + iy of the upper half-plane, y > 0."""

    x: float
    y: float

    def __post_init__(self):
        if not (self.y > 0):
            raise ValueError(f"point must have positive imaginary part, got y={self.y}")

    @property
    def z(self) -> complex:
        return complex(self.x, self.y)

    @staticmethod
    def from_complex(z: complex) -> "HPoint":
        return HPoint(z.real, z.imag)


@dataclass(frozen=True)
class UnitTangent:
    """Unit tangent vector: base point plus direction angle in [0, 2*pi).

    Angle 0 points in the +x direction, pi/2 points straight up.
    """

    point: HPoint
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "angle", _wrap_angle(self.angle))


class Moebius:
    """Orientation-preserving isometry z -> (az + b)/(cz + d).

    The representative is normalized to det = 1 (renormalizing when drift
    exceeds 1e-12) and to the sign convention that the first entry of
    (a, b, c, d) larger than 1e-12 in absolute value is positive.
    """

    __slots__ = ("a", "b", "c", "d")

    def __init__(self, a: float, b: float, c: float, d: float):
        det = a * d - b * c
        if det <= 0 or not math.isfinite(det):
            raise ValueError(f"matrix must have positive determinant, got {det}")
        if abs(det - 1.0) > DET_DRIFT:
            s = 1.0 / math.sqrt(det)
            a, b, c, d = a * s, b * s, c * s, d * s
        for entry in (a, b, c, d):
            if abs(entry) > SIGN_EPS:
                if entry < 0:
                    a, b, c, d = -a, -b, -c, -d
                break
        self.a, self.b, self.c, self.d = a, b, c, d

    @staticmethod
    def identity() -> "Moebius":
        return Moebius(1.0, 0.0, 0.0, 1.0)

    @staticmethod
    def from_array(m) -> "Moebius":
        m = np.asarray(m, dtype=float)
        return Moebius(m[0, 0], m[0, 1], m[1, 0], m[1, 1])

    def array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])

    def entries(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)

    @property
    def trace(self) -> float:
        return self.a + self.d

    def __matmul__(self, other: "Moebius") -> "Moebius":
        return Moebius(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )

    def inverse(self) -> "Moebius":
        return Moebius(self.d, -self.b, -self.c, self.a)

    def __call__(self, p: HPoint) -> HPoint:
        return apply(self, p)

    def __repr__(self) -> str:
        return f"Moebius({self.a!r}, {self.b!r}, {self.c!r}, {self.d!r})"

    def almost_equal(self, other: "Moebius", tol: float = 1e-9) -> bool:
        return max(abs(x - y) for x, y in zip(self.entries(), other.entries())) <= tol


def dist(p: HPoint, q: HPoint) -> float:
    """Hyperbolic distance between two points."""
    dx = p.x - q.x
    dy = p.y - q.y
    chord = math.hypot(dx, dy)
    return 2.0 * math.asinh(chord / (2.0 * math.sqrt(p.y * q.y)))


def apply(g: Moebius, p: HPoint) -> HPoint:
    """Apply the isometry to a point."""
    z = p.z
    denom = g.c * z + g.d
    w = (g.a * z + g.b) / denom
    # Imaginary part y/|cz+d|^2 is positive in exact arithmetic; guard rounding.
    y = p.y / (denom.real * denom.real + denom.imag * denom.imag)
    return HPoint(w.real, y)


def apply_tangent(g: Moebius, v: UnitTangent) -> UnitTangent:
    """Apply the isometry to a unit tangent vector.

    The derivative of the map at z is 1/(cz + d)^2, which rotates tangent
    vectors by -2 arg(cz + d).
    """
    z = v.point.z
    denom = g.c * z + g.d
    rotation = -2.0 * math.atan2(denom.imag, denom.real)
    return UnitTangent(apply(g, v.point), v.angle + rotation)


def ball_volume(r: float) -> float:
    """Area of a hyperbolic disk of radius r: 4 pi sinh^2(r/2)."""
    if r < 0:
        raise ValueError(f"radius must be nonnegative, got {r}")
    s = math.sinh(0.5 * r)
    return 4.0 * math.pi * s * s


def _rotation_about_i(phi: float) -> Moebius:
    """Elliptic element fixing i and rotating tangent vectors there by +phi."""
    c = math.cos(0.5 * phi)
    s = math.sin(0.5 * phi)
    return Moebius(c, s, -s, c)


def _vertical_frame(p: HPoint) -> Moebius:
    """Affine map sending i to p with derivative a positive real (keeps 'up')."""
    sq = math.sqrt(p.y)
    return Moebius(sq, p.x / sq, 0.0, 1.0 / sq)


def frame_of(v: UnitTangent) -> Moebius:
    """Isometry carrying the upward unit vector at i to v."""
    return _vertical_frame(v.point) @ _rotation_about_i(v.angle - 0.5 * math.pi)


def tangent_of(g: Moebius) -> UnitTangent:
    """Unit tangent obtained by pushing the upward vector at i through g."""
    return apply_tangent(g, UnitTangent(HPoint(0.0, 1.0), 0.5 * math.pi))


def polar_to_point(center: HPoint, ref_angle: float, r: float, theta: float) -> HPoint:
    """Point at geodesic distance r from center, direction ref_angle + theta.

    theta = 0 follows the reference direction; the area element in these
    coordinates is sinh(r) dr dtheta.
    """
    if r < 0:
        raise ValueError(f"radius must be nonnegative, got {r}")
    if r == 0.0:
        return center
    g = frame_of(UnitTangent(center, ref_angle + theta))
    return apply(g, HPoint(0.0, math.exp(r)))


def point_to_polar(center: HPoint, ref_angle: float, p: HPoint) -> tuple[float, float]:
    """Inverse of polar_to_point; returns (r, theta) with theta in (-pi, pi]."""
    r = dist(center, p)
    if r < 1e-15:
        return 0.0, 0.0
    g = frame_of(UnitTangent(center, ref_angle))
    w = apply(g.inverse(), p).z
    # Cayley transform centered at i maps geodesics through i to diameters;
    # the Euclidean argument of the image is the initial direction offset.
    zeta = (w - 1j) / (w + 1j)
    theta = math.atan2(zeta.imag, zeta.real)
    return r, theta


# Vectorized helpers used by the sampling and flow code. They operate on
# arrays of complex numbers rather than HPoint objects.

def dist_many(z, w) -> np.ndarray:
    """Pairwise-broadcast hyperbolic distance between complex arrays."""
    z = np.asarray(z, dtype=complex)
    w = np.asarray(w, dtype=complex)
    chord = np.abs(z - w)
    return 2.0 * np.arcsinh(chord / (2.0 * np.sqrt(z.imag * w.imag)))


def apply_many(g: Moebius, z) -> np.ndarray:
    """Apply one isometry to an array of complex points."""
    z = np.asarray(z, dtype=complex)
    return (g.a * z + g.b) / (g.c * z + g.d)
