"""Cocompact genus-2 surface groups, finite covers, lattice balls, domains.

A surface is described by four hyperbolic generators satisfying the canonical
relator a1 b1 A1 B1 a2 b2 A2 B2 (capital letters denote inverses). Finite
covers are described by a permutation assigned to each generator label; the
assignment must kill the relator and act transitively on sheets.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, NotTransitive, RelatorViolated
from .geometry import (
    HPoint,
    Moebius,
    apply,
    apply_many,
    dist,
    polar_to_point,
)

CANONICAL_RELATOR = "a1 b1 A1 B1 a2 b2 A2 B2"
DEFAULT_RADIUS_CAP = 14.0
RELATOR_TOL = 1e-8
DEDUP_GRID = 1e-7


@dataclass(frozen=True)
class SurfacePoint:
    """Point of a covering surface: base-domain point plus sheet index."""

    point: HPoint
    sheet: int = 0


def _parse_word(word: str, labels: tuple[str, ...]) -> list[tuple[int, bool]]:
    """Split a word like 'a1 B1' into (generator index, inverted) pairs."""
    out = []
    for token in word.split():
        inverted = token[0].isupper()
        label = token[0].lower() + token[1:]
        if label not in labels:
            raise ValueError(f"unknown generator label {token!r}")
        out.append((labels.index(label), inverted))
    return out


class FuchsianGroup:
    """Four-generator cocompact group with the canonical genus-2 relator."""

    def __init__(
        self,
        generators: list[Moebius],
        labels: tuple[str, ...] = ("a1", "b1", "a2", "b2"),
        relator: str = CANONICAL_RELATOR,
    ):
        if len(generators) != 4 or len(labels) != 4:
            raise ValueError("expected exactly four labeled generators")
        self.generators = tuple(generators)
        self.labels = tuple(labels)
        self.relator = relator
        for lab, g in zip(labels, generators):
            if abs(g.trace) <= 2.0:
                raise ValueError(
                    f"generator {lab} is not strictly hyperbolic (|trace| = {abs(g.trace)})"
                )
        rel = self.word_matrix(relator)
        dev = min(
            max(abs(x - y) for x, y in zip(rel.entries(), (1.0, 0.0, 0.0, 1.0))),
            max(abs(x + y) for x, y in zip(rel.entries(), (1.0, 0.0, 0.0, 1.0))),
        )
        if dev > RELATOR_TOL:
            raise RelatorViolated(f"relator deviates from identity by {dev:.3e}")
        self.genus = 2
        self.volume = 4.0 * math.pi
        self._element_cache: dict[str, object] = {}

    def generator(self, label: str, inverted: bool = False) -> Moebius:
        g = self.generators[self.labels.index(label)]
        return g.inverse() if inverted else g

    def word_matrix(self, word: str) -> Moebius:
        m = Moebius.identity()
        for idx, inverted in _parse_word(word, self.labels):
            g = self.generators[idx]
            m = m @ (g.inverse() if inverted else g)
        return m

    def symmetric_generators(self) -> list[Moebius]:
        """Generators followed by their inverses (8 elements)."""
        return list(self.generators) + [g.inverse() for g in self.generators]

    def to_json_dict(self) -> dict:
        return {
            "generators": [list(g.entries()) for g in self.generators],
            "labels": list(self.labels),
            "relator": self.relator,
        }

    @staticmethod
    def from_json_dict(data: dict) -> "FuchsianGroup":
        gens = [Moebius(*row) for row in data["generators"]]
        return FuchsianGroup(gens, tuple(data["labels"]), data["relator"])

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def bolza_group() -> FuchsianGroup:
    """The genus-2 surface of maximal symmetry.

    Building blocks are the conjugates g_k of the translation
    gamma0 = [[1+sqrt2, sqrt(2+2 sqrt2)], [sqrt(2+2 sqrt2), 1+sqrt2]]
    by rotations about i through k pi/4. The canonical generating set below
    consists of short products of the g_k; each generator has trace
    2(1+sqrt2), hence translation length 2 arccosh(1+sqrt2), and the
    canonical relator holds to machine precision.
    """
    s2 = math.sqrt(2.0)
    g0 = Moebius(1.0 + s2, math.sqrt(2.0 + 2.0 * s2), math.sqrt(2.0 + 2.0 * s2), 1.0 + s2)

    def rot(phi: float) -> Moebius:
        return Moebius(math.cos(0.5 * phi), math.sin(0.5 * phi), -math.sin(0.5 * phi), math.cos(0.5 * phi))

    g = [rot(k * math.pi / 4.0) @ g0 @ rot(-k * math.pi / 4.0) for k in range(4)]
    a1 = g[0]
    b1 = g[1].inverse() @ g[2] @ g[3].inverse()
    a2 = g[1].inverse() @ g[2]
    b2 = g[3].inverse() @ g[2]
    return FuchsianGroup([a1, b1, a2, b2])


def _compose_perms(p: tuple[int, ...], q: tuple[int, ...]) -> tuple[int, ...]:
    """(p o q)(s) = p(q(s))."""
    return tuple(p[q[s]] for s in range(len(p)))


def _invert_perm(p: tuple[int, ...]) -> tuple[int, ...]:
    out = [0] * len(p)
    for s, v in enumerate(p):
        out[v] = s
    return tuple(out)


class CoverDescriptor:
    """Finite cover given by a permutation representation of the group.

    Sheets are glued by the diagonal action gamma . (z, s) = (gamma z,
    sigma_gamma(s)); the cover is connected iff the permutations act
    transitively.
    """

    def __init__(self, base: FuchsianGroup, degree: int, permutations: dict[str, tuple[int, ...]]):
        if degree < 1:
            raise ValueError(f"degree must be >= 1, got {degree}")
        if set(permutations) != set(base.labels):
            raise ValueError("permutations must be keyed by exactly the generator labels")
        perms = {}
        for lab, p in permutations.items():
            p = tuple(int(v) for v in p)
            if sorted(p) != list(range(degree)):
                raise ValueError(f"assignment for {lab} is not a permutation of 0..{degree-1}")
            perms[lab] = p
        self.base = base
        self.degree = degree
        self.permutations = perms

        rel = self.word_permutation(base.relator)
        if rel != tuple(range(degree)):
            raise RelatorViolated(f"relator permutation is {rel}, not the identity")
        reached = {0}
        frontier = [0]
        while frontier:
            s = frontier.pop()
            for p in perms.values():
                for t in (p[s], _invert_perm(p)[s]):
                    if t not in reached:
                        reached.add(t)
                        frontier.append(t)
        if len(reached) != degree:
            raise NotTransitive(
                f"permutations reach only {len(reached)} of {degree} sheets"
            )
        self.genus = degree * (base.genus - 1) + 1
        self.volume = degree * base.volume

    def perm(self, label: str, inverted: bool = False) -> tuple[int, ...]:
        p = self.permutations[label]
        return _invert_perm(p) if inverted else p

    def word_permutation(self, word: str) -> tuple[int, ...]:
        out = tuple(range(self.degree))
        for idx, inverted in _parse_word(word, self.base.labels):
            out = _compose_perms(out, self.perm(self.base.labels[idx], inverted))
        return out

    def to_json_dict(self) -> dict:
        d = self.base.to_json_dict()
        d["cover"] = {
            "degree": self.degree,
            "perm": {lab: list(p) for lab, p in self.permutations.items()},
        }
        return d

    @staticmethod
    def from_json_dict(data: dict) -> "CoverDescriptor":
        base = FuchsianGroup.from_json_dict(data)
        cov = data["cover"]
        return CoverDescriptor(base, int(cov["degree"]), {k: tuple(v) for k, v in cov["perm"].items()})

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_cover(base: FuchsianGroup, permutations: dict[str, tuple[int, ...]]) -> CoverDescriptor:
    degree = len(next(iter(permutations.values())))
    return CoverDescriptor(base, degree, permutations)


def trivial_cover(base: FuchsianGroup) -> CoverDescriptor:
    ident = (0,)
    return CoverDescriptor(base, 1, {lab: ident for lab in base.labels})


def cyclic_cover(base: FuchsianGroup, m: int) -> CoverDescriptor:
    """Degree-m cyclic cover: a1 shifts sheets by one, the rest act trivially."""
    shift = tuple((s + 1) % m for s in range(m))
    ident = tuple(range(m))
    perms = {lab: ident for lab in base.labels}
    perms[base.labels[0]] = shift
    return CoverDescriptor(base, m, perms)


def regular_cover(base: FuchsianGroup, g: tuple[int, ...], h: tuple[int, ...]) -> CoverDescriptor:
    """Cover from a pair of permutations: a1, b2 -> g and b1, a2 -> h.

    The relator image is [g, h][h, g], which is always the identity, so any
    transitive pair works.
    """
    g = tuple(g)
    h = tuple(h)
    a1, b1, a2, b2 = base.labels
    return CoverDescriptor(base, len(g), {a1: g, b1: h, a2: h, b2: g})


def as_cover(surface: FuchsianGroup | CoverDescriptor) -> CoverDescriptor:
    if isinstance(surface, CoverDescriptor):
        return surface
    return trivial_cover(surface)


# Surface JSON files round-trip bit-exactly (floats serialized via repr).

def save_surface(surface: FuchsianGroup | CoverDescriptor, path) -> None:
    with open(path, "w") as fh:
        json.dump(surface.to_json_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_surface(path) -> FuchsianGroup | CoverDescriptor:
    with open(path) as fh:
        data = json.load(fh)
    if "cover" in data:
        return CoverDescriptor.from_json_dict(data)
    return FuchsianGroup.from_json_dict(data)


@dataclass
class LatticeBall:
    """Group elements gamma with d(x, gamma y) <= radius.

    Each element carries the sheet permutation of its word when the input
    carried cover data (None for a plain group).
    """

    center: tuple[HPoint, HPoint]
    radius: float
    elements: list[tuple[Moebius, tuple[int, ...] | None]]
    distances: list[float]

    @property
    def count(self) -> int:
        return len(self.elements)

    def matrices(self) -> list[Moebius]:
        return [m for m, _ in self.elements]

    def connecting(self, sheet_to: int, sheet_from: int) -> list[tuple[Moebius, float]]:
        """Elements whose permutation sends sheet_from to sheet_to."""
        out = []
        for (m, p), d in zip(self.elements, self.distances):
            if p is None or p[sheet_from] == sheet_to:
                out.append((m, d))
        return out


def _sign_fix(mats: np.ndarray) -> np.ndarray:
    """Vectorized sign convention: first significant entry positive.

    Significance is relative to the matrix's largest entry: deep words have
    entries of size e^(d/2), where an absolute cutoff would read rounding
    noise in a true-zero entry as a sign, splitting one element into two.
    """
    flat = mats.reshape(len(mats), 4)
    scale = np.abs(flat).max(axis=1, keepdims=True)
    lead_idx = (np.abs(flat) > 1e-9 * scale).argmax(axis=1)
    lead = flat[np.arange(len(flat)), lead_idx]
    return mats * np.where(lead < 0, -1.0, 1.0)[:, None, None]


def _grid_keys(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two offset quantization grids; equal elements share a key on one grid."""
    flat = mats.reshape(len(mats), 4) / DEDUP_GRID
    ka = np.floor(flat).astype(np.int64)
    kb = np.floor(flat + 0.5).astype(np.int64)
    return ka, kb


def _cache_path(tag: str) -> str | None:
    root = os.environ.get("HYPERWAVE_CACHE")
    if not root:
        return None
    os.makedirs(root, exist_ok=True)
    return os.path.join(root, f"ball-{tag}.npz")


_CENTER = HPoint(0.0, 1.0)


def _hyperboloid(z: complex) -> np.ndarray:
    """Upper half-plane point as a Minkowski vector (x1, x2, x0), x0 > 0."""
    x, y = z.real, z.imag
    s = x * x + y * y
    return np.array([(s - 1.0) / (2.0 * y), x / y, (s + 1.0) / (2.0 * y)])


def _polygon_corner_cosh(translates: np.ndarray) -> np.ndarray:
    """Corners of the polygon cut by the bisectors of i and the translates.

    Each corner is the intersection of two bisectors, solved linearly in
    the hyperboloid model and kept when it lies in every half-space.
    Returns cosh of the corner distances from i.
    """
    n = len(translates)
    normals = np.empty_like(translates)
    normals[:, 0] = -translates[:, 0]
    normals[:, 1] = -translates[:, 1]
    normals[:, 2] = translates[:, 2] - 1.0
    ai, bi = np.triu_indices(n, 1)
    v = np.cross(normals[ai], normals[bi])
    norm2 = v[:, 0] ** 2 + v[:, 1] ** 2 - v[:, 2] ** 2
    v = v[norm2 < -1e-12]
    v = v / np.sqrt(-norm2[norm2 < -1e-12])[:, None]
    v[v[:, 2] < 0.0] *= -1.0
    cosh_t = (
        v[:, 2][:, None] * translates[:, 2][None, :]
        - v[:, 0][:, None] * translates[:, 0][None, :]
        - v[:, 1][:, None] * translates[:, 1][None, :]
    )
    inside = np.all(v[:, 2][:, None] <= cosh_t + 1e-9, axis=1)
    return v[inside, 2]


def _dirichlet_polygon(group: FuchsianGroup) -> dict:
    """Dirichlet domain about i: circumradius and side-pairing step set.

    The generating set of a group need not pair the faces of its Dirichlet
    domain (a face pairing can be a longer word), so the side pairings are
    computed: short words are collected breadth-first without pruning, the
    polygon cut by all their bisectors is intersected exactly, and every
    element with d(i, w i) <= 2 rho is kept as a step. Any element whose
    bisector supports a face satisfies that bound, so the step set covers
    the face pairings; lattice-ball enumeration and center reduction both
    walk over it. Results are cached on the group.
    """
    cached = group._element_cache.get("dirichlet")
    if cached is not None:
        return cached
    gens = group.symmetric_generators()
    gen_arr = np.stack([g.array() for g in gens])

    gen_translates = np.stack([_hyperboloid(apply(g, _CENTER).z) for g in gens])
    corners = _polygon_corner_cosh(gen_translates)
    if not len(corners):
        raise ValueError("generator bisectors do not close around the center")
    rho_coarse = math.acosh(max(float(corners.max()), 1.0))

    mats = [np.eye(2)]
    words: list[tuple[int, ...]] = [()]
    seen: set[bytes] = set()
    ka, kb = _grid_keys(np.eye(2)[None])
    seen.add(b"A" + ka[0].tobytes())
    seen.add(b"B" + kb[0].tobytes())
    frontier = np.eye(2)[None]
    frontier_words: list[tuple[int, ...]] = [()]
    for _ in range(5):
        children = np.einsum("nij,gjk->ngik", frontier, gen_arr).reshape(-1, 2, 2)
        child_words = [w + (g,) for w in frontier_words for g in range(len(gens))]
        det = children[:, 0, 0] * children[:, 1, 1] - children[:, 0, 1] * children[:, 1, 0]
        children = children / np.sqrt(det)[:, None, None]
        children = _sign_fix(children)
        ka, kb = _grid_keys(children)
        keep = []
        for k in range(len(children)):
            key_a = b"A" + ka[k].tobytes()
            key_b = b"B" + kb[k].tobytes()
            if key_a in seen or key_b in seen:
                continue
            seen.add(key_a)
            seen.add(key_b)
            keep.append(k)
        frontier = children[keep]
        frontier_words = [child_words[k] for k in keep]
        mats.extend(frontier)
        words.extend(frontier_words)

    all_mats = np.stack(mats)
    ci = (all_mats[:, 0, 0] * 1j + all_mats[:, 0, 1]) / (
        all_mats[:, 1, 0] * 1j + all_mats[:, 1, 1]
    )
    cosh_center = 1.0 + (ci.real**2 + (ci.imag - 1.0) ** 2) / (2.0 * ci.imag)

    pool = cosh_center <= math.cosh(2.0 * rho_coarse + 0.1)
    pool[0] = False  # identity has no bisector
    corners = _polygon_corner_cosh(
        np.stack([_hyperboloid(z) for z in ci[pool]])
    )
    if not len(corners):
        raise ValueError("Dirichlet polygon did not close over the probed words")
    rho = math.acosh(max(float(corners.max()), 1.0)) + 1e-9

    step = cosh_center <= math.cosh(2.0 * rho + 1e-6)
    step[0] = False
    step_idx = np.nonzero(step)[0]
    result = {
        "rho": rho,
        "steps": all_mats[step_idx],
        "words": [words[k] for k in step_idx],
        "moebius": [Moebius.from_array(all_mats[k]) for k in step_idx],
    }
    group._element_cache["dirichlet"] = result
    return result


def _reduce_toward_center(group: FuchsianGroup, p: HPoint):
    """Greedily move p into the Dirichlet domain by side-pairing steps.

    Returns (delta, word, image) with image = delta p and word the list of
    symmetric-generator indices composing delta (applied first to last).
    Descent over the full side-pairing step set runs until no step improves
    the distance to the center, which leaves the image in the closed
    Dirichlet domain (up to a 1e-12 stall band). Enumerating a lattice
    ball around a far-off center would build words with large entries
    whose rounding noise defeats quantized deduplication, and the ball
    search prunes on domain-tile translates, which assumes centers inside
    the domain.
    """
    poly = _dirichlet_polygon(group)
    steps = poly["moebius"]
    step_words = poly["words"]
    delta = Moebius.identity()
    word: list[int] = []
    current = p
    for _ in range(200):
        d0 = dist(_CENTER, current)
        best_k = None
        best_d = d0 - 1e-12
        best_pt = current
        for k, g in enumerate(steps):
            cand = apply(g, current)
            dk = dist(_CENTER, cand)
            if dk < best_d:
                best_k, best_d, best_pt = k, dk, cand
        if best_k is None:
            break
        delta = steps[best_k] @ delta
        word.extend(reversed(step_words[best_k]))
        current = best_pt
    return delta, word, current


def enumerate_ball(
    surface: FuchsianGroup | CoverDescriptor,
    x: HPoint,
    y: HPoint,
    t: float,
    cap: float = DEFAULT_RADIUS_CAP,
) -> LatticeBall:
    """Enumerate {gamma : d(x, gamma y) <= t} by pruned breadth-first search.

    Both centers are first reduced into the Dirichlet domain about i (the
    ball is enumerated around the reduced points and conjugated back).
    Words grow one side-pairing step at a time and are pruned by where
    they move the domain center: a word w survives while d(x_red, w i)
    stays within t + rho, with rho the domain circumradius. Every gamma
    with d(x_red, gamma y_red) <= t is reached under this prune: the
    geodesic between those points crosses a face-connected chain of
    domain tiles, each tile w D in the chain touches the geodesic so its
    center w i lies within t + rho of x_red, and each face step appends
    one side pairing of the domain. Pruning on the translate of y itself
    is not safe, and stepping over a generating set that does not pair
    the domain's faces is not safe either; a short element can then only
    be reached through far-off excursions that any useful prune rejects.
    """
    if t < 0:
        raise ValueError(f"radius must be nonnegative, got {t}")
    if t > cap:
        raise CapExceeded(f"radius {t} exceeds cap {cap}")

    cover = surface if isinstance(surface, CoverDescriptor) else None
    group = cover.base if cover is not None else surface

    track_perms = cover is not None
    if track_perms:
        fp = cover.fingerprint()
        gperms = [cover.perm(lab) for lab in group.labels]
        gperms += [cover.perm(lab, inverted=True) for lab in group.labels]
        gperm_arr = np.array(gperms, dtype=np.int64)
        degree = cover.degree
    else:
        fp = group.fingerprint()

    dx, wx, x_red = _reduce_toward_center(group, x)
    dy, wy, y_red = _reduce_toward_center(group, y)

    def conjugate_back(core_mats, core_perms, core_dists):
        if not wx and not wy:
            elements = [
                (Moebius.from_array(np.asarray(m)), p)
                for m, p in zip(core_mats, core_perms)
            ]
            return LatticeBall((x, y), t, elements, [float(d) for d in core_dists])
        left = dx.inverse().array()
        right = dy.array()
        if track_perms:
            sx = tuple(range(degree))
            for k in wx:
                sx = _compose_perms(gperms[k], sx)
            sy = tuple(range(degree))
            for k in wy:
                sy = _compose_perms(gperms[k], sy)
            sx_inv = _invert_perm(sx)
        elements = []
        for m, p in zip(core_mats, core_perms):
            mat = Moebius.from_array(left @ np.asarray(m) @ right)
            if track_perms:
                p = _compose_perms(sx_inv, _compose_perms(p, sy))
            elements.append((mat, p))
        return LatticeBall((x, y), t, elements, [float(d) for d in core_dists])

    payload = f"b3-{fp}-{x_red.x!r}-{x_red.y!r}-{y_red.x!r}-{y_red.y!r}-{t!r}"
    tag = hashlib.sha256(payload.encode()).hexdigest()[:24]
    cache_file = _cache_path(tag)
    if cache_file and os.path.exists(cache_file):
        data = np.load(cache_file)
        mats, dists = data["mats"], data["dists"]
        if track_perms:
            stored = data["perms"]
            perms = [tuple(int(v) for v in stored[k]) for k in range(len(mats))]
        else:
            perms = [None] * len(mats)
        return conjugate_back(list(mats), perms, list(dists))

    poly = _dirichlet_polygon(group)
    step_arr = poly["steps"]
    prune = t + poly["rho"] + 1e-3
    if track_perms:
        step_perm_arr = np.empty((len(step_arr), degree), dtype=np.int64)
        for s_idx, sw in enumerate(poly["words"]):
            perm = np.arange(degree, dtype=np.int64)
            for letter in sw:
                perm = perm[gperm_arr[letter]]
            step_perm_arr[s_idx] = perm

    zx, zy = x_red.z, y_red.z
    zc = complex(0.0, 1.0)

    def orbit_dist(mats: np.ndarray, src: complex) -> np.ndarray:
        denom = mats[:, 1, 0] * src + mats[:, 1, 1]
        w = (mats[:, 0, 0] * src + mats[:, 0, 1]) / denom
        chord = np.abs(w - zx)
        return 2.0 * np.arcsinh(chord / (2.0 * np.sqrt(np.maximum(w.imag, 1e-300) * x_red.y)))

    ident = np.eye(2)[None, :, :]
    visited: set[bytes] = set()
    ka, kb = _grid_keys(ident)
    visited.add(b"A" + ka[0].tobytes())
    visited.add(b"B" + kb[0].tobytes())

    frontier = ident
    frontier_perms = (
        np.arange(degree, dtype=np.int64)[None, :] if track_perms else None
    )

    out_mats = []
    out_perms = []
    out_dists = []
    d0 = float(orbit_dist(ident, zy)[0])
    if d0 <= t:
        out_mats.append(np.eye(2))
        out_perms.append(tuple(range(degree)) if track_perms else None)
        out_dists.append(d0)

    while len(frontier):
        children = np.einsum("nij,gjk->ngik", frontier, step_arr).reshape(-1, 2, 2)
        if track_perms:
            # child word w.s acts on sheets by sigma_w o sigma_s
            child_perms = frontier_perms[:, step_perm_arr].reshape(-1, degree)
        det = children[:, 0, 0] * children[:, 1, 1] - children[:, 0, 1] * children[:, 1, 0]
        children = children / np.sqrt(det)[:, None, None]
        children = _sign_fix(children)
        dvals = orbit_dist(children, zy)
        cvals = orbit_dist(children, zc)
        ka, kb = _grid_keys(children)

        keep_idx = []
        for k in range(len(children)):
            if cvals[k] > prune:
                continue
            key_a = b"A" + ka[k].tobytes()
            key_b = b"B" + kb[k].tobytes()
            if key_a in visited or key_b in visited:
                continue
            visited.add(key_a)
            visited.add(key_b)
            keep_idx.append(k)

        if not keep_idx:
            break
        keep = np.array(keep_idx)
        frontier = children[keep]
        if track_perms:
            frontier_perms = child_perms[keep]
        dk = dvals[keep]
        hits = np.nonzero(dk <= t)[0]
        for k in hits:
            out_mats.append(frontier[k])
            out_perms.append(tuple(int(v) for v in frontier_perms[k]) if track_perms else None)
            out_dists.append(float(dk[k]))

    if cache_file:
        np.savez(
            cache_file,
            mats=np.array(out_mats) if out_mats else np.zeros((0, 2, 2)),
            dists=np.array(out_dists),
            perms=np.array([list(p) for p in out_perms], dtype=np.int64)
            if track_perms and out_perms
            else np.zeros((0, 0), dtype=np.int64),
        )

    return conjugate_back(out_mats, out_perms, out_dists)


def counting_bound(t: float, injrad: float) -> float:
    """Upper bound e^(t+1) / r^2 with r = min(1, injrad / 2)."""
    r = min(1.0, 0.5 * injrad)
    return math.exp(t + 1.0) / (r * r)


def _is_identity(m: Moebius) -> bool:
    return max(abs(m.a - 1.0), abs(m.b), abs(m.c), abs(m.d - 1.0)) < 1e-9


def injectivity_radius(
    surface: FuchsianGroup | CoverDescriptor,
    z: HPoint,
    sheet: int = 0,
    cap: float = DEFAULT_RADIUS_CAP,
) -> float:
    """Half the shortest displacement d(z, gamma z) over deck elements fixing the sheet."""
    cover = as_cover(surface)
    t = 2.0
    while True:
        ball = enumerate_ball(cover, z, z, min(t, cap), cap=cap)
        best = math.inf
        for (m, p), d in zip(ball.elements, ball.distances):
            if _is_identity(m):
                continue
            if p is not None and p[sheet] != sheet:
                continue
            best = min(best, d)
        if best < math.inf:
            return 0.5 * best
        if t >= cap:
            raise CapExceeded(
                f"no returning element within radius {cap}; injectivity radius too large"
            )
        t = min(2.0 * t, cap)


def _domain_elements(group: FuchsianGroup, radius: float) -> list[tuple[Moebius, np.ndarray]]:
    """Nontrivial elements with d(i, gamma i) <= radius, cached on the group."""
    key = f"domain-{radius!r}"
    cached = group._element_cache.get(key)
    if cached is not None:
        return cached
    base_pt = HPoint(0.0, 1.0)
    ball = enumerate_ball(group, base_pt, base_pt, radius)
    out = []
    for (m, _), d in zip(ball.elements, ball.distances):
        if _is_identity(m):
            continue
        out.append((m, m.array()))
    group._element_cache[key] = out
    return out


def _nearest_translate_gap(group: FuchsianGroup, zs: np.ndarray, search_radius: float) -> np.ndarray:
    """min_gamma d(i, gamma z) - d(i, z) for each z (negative outside the domain)."""
    elements = _domain_elements(group, search_radius)
    zi = complex(0.0, 1.0)
    base = 2.0 * np.arcsinh(np.abs(zs - zi) / (2.0 * np.sqrt(zs.imag)))
    best = np.full(len(zs), np.inf)
    for m, arr in elements:
        w = apply_many(m, zs)
        d = 2.0 * np.arcsinh(np.abs(w - zi) / (2.0 * np.sqrt(w.imag)))
        best = np.minimum(best, d)
    return best - base


def dirichlet_domain_membership(
    surface: FuchsianGroup | CoverDescriptor,
    z: HPoint,
    probe_radius: float | None = None,
) -> bool:
    """Whether z lies in the Dirichlet fundamental domain centered at i.

    Interior means d(i, z) < d(i, gamma z) - 1e-10 for every nontrivial gamma.
    Within the 1e-10 tie band the point is assigned deterministically: it
    counts as inside iff the identity's entry tuple precedes the entry tuple
    of the lexicographically smallest tying element.
    """
    group = surface.base if isinstance(surface, CoverDescriptor) else surface
    d_center = dist(HPoint(0.0, 1.0), z)
    if probe_radius is None:
        # round up to a coarse grid so the cached element list is shared;
        # any element beating z satisfies d(i, gamma i) <= 2 d(i, z)
        probe_radius = 0.5 * math.ceil((2.0 * d_center + 0.05) / 0.5)
    if probe_radius > DEFAULT_RADIUS_CAP:
        raise CapExceeded(
            f"membership probe radius {probe_radius} exceeds cap {DEFAULT_RADIUS_CAP}"
        )
    elements = _domain_elements(group, probe_radius)
    if not elements:
        return True
    zi = complex(0.0, 1.0)
    zc = np.array([z.z])
    best = math.inf
    ties: list[tuple] = []
    for m, arr in elements:
        w = apply_many(m, zc)[0]
        d = 2.0 * math.asinh(abs(w - zi) / (2.0 * math.sqrt(w.imag)))
        if d < best - 1e-10:
            best = d
            ties = [m.entries()]
        elif abs(d - best) <= 1e-10:
            ties.append(m.entries())
    if d_center < best - 1e-10:
        return True
    if d_center > best + 1e-10:
        return False
    return (1.0, 0.0, 0.0, 1.0) < min(ties)


def quotient_dist(
    surface: FuchsianGroup | CoverDescriptor,
    x: SurfacePoint,
    y: SurfacePoint,
    cutoff: float,
) -> float:
    """Distance on the (covering) surface, or inf when it exceeds cutoff."""
    cover = as_cover(surface)
    ball = enumerate_ball(cover, x.point, y.point, cutoff)
    best = math.inf
    for (m, p), d in zip(ball.elements, ball.distances):
        if p is not None and p[y.sheet] != x.sheet:
            continue
        best = min(best, d)
    return best


def domain_circumradius(group: FuchsianGroup) -> float:
    """Largest distance from i to the Dirichlet domain about i."""
    return _dirichlet_polygon(group)["rho"]


def sample_domain(group: FuchsianGroup, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform sample of the Dirichlet domain, as complex numbers.

    Rejection sampling from the hyperbolic polar cap of the circumradius;
    acceptance rate is vol(X) / vol(cap).
    """
    radius = domain_circumradius(group)
    search = 2.0 * radius + 0.1
    center = HPoint(0.0, 1.0)
    cosh_r = math.cosh(radius)
    out = np.empty(n, dtype=complex)
    have = 0
    while have < n:
        batch = max(256, int(1.5 * (n - have)))
        u = rng.uniform(0.0, 1.0, batch)
        r = np.arccosh(1.0 + u * (cosh_r - 1.0))
        theta = rng.uniform(0.0, 2.0 * math.pi, batch)
        zs = np.array(
            [polar_to_point(center, 0.0, ri, ti).z for ri, ti in zip(r, theta)]
        )
        gap = _nearest_translate_gap(group, zs, search)
        good = zs[gap > 1e-12]
        take = min(len(good), n - have)
        out[have : have + take] = good[:take]
        have += take
    return out


def domain_volume_estimate(
    group: FuchsianGroup, n: int, seed: int = 0
) -> tuple[float, float]:
    """Monte Carlo estimate of the Dirichlet domain's hyperbolic area.

    Returns (estimate, standard error); the exact value is 4 pi (genus 2).
    """
    radius = domain_circumradius(group)
    search = 2.0 * radius + 0.1
    center = HPoint(0.0, 1.0)
    cosh_r = math.cosh(radius)
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.0, 1.0, n)
    r = np.arccosh(1.0 + u * (cosh_r - 1.0))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    zs = np.array([polar_to_point(center, 0.0, ri, ti).z for ri, ti in zip(r, theta)])
    gap = _nearest_translate_gap(group, zs, search)
    inside = gap > 1e-12
    p = float(inside.mean())
    cap_volume = 4.0 * math.pi * math.sinh(0.5 * radius) ** 2
    return p * cap_volume, cap_volume * math.sqrt(max(p * (1 - p), 0.0) / n)


def thin_part_volume_fraction(
    surface: FuchsianGroup | CoverDescriptor,
    threshold: float,
    n_samples: int,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte Carlo fraction of the surface where injectivity radius <= threshold.

    Returns (fraction, standard error). Sheets are sampled uniformly and the
    pointwise test uses one shared lattice ball.
    """
    cover = as_cover(surface)
    group = cover.base
    # a ball of radius InjRad(x) embeds, so InjRad is capped by the volume bound;
    # thresholds at or above the cap mark every point thin
    max_injrad = 2.0 * math.asinh(math.sqrt(cover.volume / (4.0 * math.pi)))
    if threshold >= max_injrad:
        return 1.0, 0.0
    rng = np.random.default_rng(seed)
    zs = sample_domain(group, n_samples, rng)
    sheets = rng.integers(0, cover.degree, n_samples)

    radius = domain_circumradius(group)
    search = 2.0 * radius + 2.0 * threshold + 0.1
    if search > DEFAULT_RADIUS_CAP:
        raise CapExceeded(
            f"threshold {threshold} needs lattice radius {search:.2f} > cap {DEFAULT_RADIUS_CAP}"
        )
    base_pt = HPoint(0.0, 1.0)
    ball = enumerate_ball(cover, base_pt, base_pt, search)
    thin = np.zeros(n_samples, dtype=bool)
    for (m, p), d0 in zip(ball.elements, ball.distances):
        if _is_identity(m):
            continue
        w = apply_many(m, zs)
        disp = 2.0 * np.arcsinh(np.abs(w - zs) / (2.0 * np.sqrt(w.imag * zs.imag)))
        close = disp <= 2.0 * threshold
        if p is None:
            thin |= close
        else:
            fixed = np.array([p[s] == s for s in range(cover.degree)])
            thin |= close & fixed[sheets]
    frac = float(thin.mean())
    stderr = math.sqrt(max(frac * (1.0 - frac), 0.0) / n_samples)
    return frac, stderr
