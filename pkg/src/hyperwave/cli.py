"""Experiment orchestration: JSON configs, staged artifact pipelines, checks.

An experiment is a JSON config naming a base surface, a family of cover
degrees, sampling and window parameters, a potential, variance-sum
parameters, and optionally geodesic-flow correlation parameters. The
pipeline runs as stages (build-cover, sample, eigensolve, qvar, mixing,
report) that communicate only through files in one output directory, so
any stage can be rerun alone and other tooling can consume the artifacts.
A verification runner exercises the library's standing inequalities
(lattice counting, the propagator perturbation identity, the scalar
time-average floor, the kernel integral bounds) and records pass/fail per
check. The process exits nonzero exactly when an enabled check fails.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, HyperwaveError, LockHeld, MissingArtifact
from .fuchsian import (
    CoverDescriptor,
    SurfacePoint,
    as_cover,
    bolza_group,
    counting_bound,
    cyclic_cover,
    enumerate_ball,
    injectivity_radius,
    load_surface,
    sample_domain,
    save_surface,
    trivial_cover,
)
from .geoflow import (
    TOTAL_CAP,
    MixingParams,
    ball_indicator,
    bump_observable,
    correlation_curve,
    fit_decay_rate,
    write_decay_csv,
)
from .geometry import HPoint
from .kernels import (
    WindowSpec,
    abel_overlap,
    f_decay_integral,
    lens_integral,
    time_avg_h2,
)
from .opcalc import PropagatorSet, duhamel_Q, hs_norm, propagate
from .qvar import (
    DEFAULT_OBSERVABLE,
    DELTA_GRID,
    QVarConfig,
    QVarReport,
    band_decomposition_check,
    bound_chain_check,
    build_observable,
    diagonal_variance,
    offdiag_variance,
    trend_statistic,
    windowed_mass_check,
    write_qvar_csv,
    write_qvar_json,
)
from .spectral import (
    BASE_AREA,
    SpectralData,
    SurfaceSample,
    assemble_operator,
    make_potential,
    sample_surface,
    solve_window,
)

# Verification-suite parameters. Fixed here, not in the config: the checks
# assert library facts, so varying them per experiment would only blur what
# a pass means.
VERIFY_SEED = 5
COUNT_TIMES = tuple(float(t) for t in range(1, 9))
COUNT_PAIRS = 10
COUNT_RADIUS = 8.0
DUHAMEL_INSTANCES = 20
DUHAMEL_SIZE = 16
DUHAMEL_ORDER = 48
DUHAMEL_TIME = 2.0
DUHAMEL_TOL = 1e-8
SCALAR_POINTS = 200
SCALAR_HORIZON = 100.0
SCALAR_FLOOR = 4.0 / 9.0
GRID_TIMES = (0.5, 1.0, 2.0, 4.0)
GRID_DISTS = (0.0, 0.3, 1.0, 3.0)
DECAY_PAIRS = ((1.0, 0.5), (2.0, 0.5), (2.0, 1.0), (4.0, 1.0), (4.0, 2.0), (4.0, 3.0))
DECAY_BETAS = (0.5, 1.0)
INTEGRAL_SLACK = 1e-5

# Tolerance on the in-run mass and band identities recorded by the qvar stage.
IDENTITY_TOL = 1e-9

LOCK_NAME = ".lock"
MANIFEST_NAME = "manifest.json"
VERIFICATION_NAME = "verification.json"

_SAMPLE_ARRAYS = ("base_x", "base_y", "sheets", "rows", "cols", "dvals")

_DEFAULT_FLOW = {
    "kind": "ball",
    "radius": 0.5,
    "centers": [[0.0, 1.0], [0.0, 1.0]],
    "times": [float(t) for t in range(0, 13)],
    "n_samples": 100_000,
    "seed": 2,
}

_DEFAULTS = {
    "surface": "bolza",
    "degrees": [],
    "sampling": {"points_per_sheet": 600, "seed": 21, "eps": "tuned"},
    "potential": None,
    "window": {"a": 1.25, "b": 9.25, "a_outer": 1.25, "b_outer": 12.25},
    "qvar": {
        "T": 100.0,
        "tau": [0.5],
        "delta": list(DELTA_GRID),
        "observable": dict(DEFAULT_OBSERVABLE),
        "normalization": "sup1_mean0",
    },
    "flow": None,
    "out": "out",
    "verify": {"counting": True, "duhamel": True, "scalar": True, "integrals": True},
}


def _require_number(value, path: str, minimum=None, strict=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise ConfigError(path, f"must be finite, got {value!r}")
    if minimum is not None:
        if strict and v <= minimum:
            raise ConfigError(path, f"must be greater than {minimum}, got {value}")
        if not strict and v < minimum:
            raise ConfigError(path, f"must be at least {minimum}, got {value}")
    return v


def _require_int(value, path: str, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(path, f"must be at least {minimum}, got {value}")
    return value


def _reject_unknown(doc: dict, allowed, prefix: str = "") -> None:
    for key in doc:
        if key not in allowed:
            path = f"{prefix}{key}" if prefix else str(key)
            raise ConfigError(path, "unknown field")


def _check_center(raw, path: str) -> None:
    if not isinstance(raw, (list, tuple)) or len(raw) not in (2, 3):
        raise ConfigError(path, f"expected [x, y] or [x, y, sheet], got {raw!r}")
    x = _require_number(raw[0], f"{path}[0]")
    y = _require_number(raw[1], f"{path}[1]", minimum=0.0, strict=True)
    del x, y
    if len(raw) == 3:
        _require_int(raw[2], f"{path}[2]", minimum=0)


def _as_surface_point(raw) -> SurfacePoint:
    sheet = int(raw[2]) if len(raw) == 3 else 0
    return SurfacePoint(HPoint(float(raw[0]), float(raw[1])), sheet)


def _merge_defaults(defaults, override, prefix: str = ""):
    """Dict fields merge key by key over the defaults; scalars replace."""
    if isinstance(defaults, dict) and isinstance(override, dict):
        merged = {k: _copy(v) for k, v in defaults.items()}
        for key, value in override.items():
            if key in defaults and isinstance(defaults[key], dict) and isinstance(value, dict):
                merged[key] = _merge_defaults(defaults[key], value, f"{prefix}{key}.")
            else:
                merged[key] = _copy(value)
        return merged
    return _copy(override)


def _copy(value):
    """Deep copy into plain JSON shapes; tuples become lists."""
    if isinstance(value, dict):
        return {k: _copy(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_copy(v) for v in value]
    return value


@dataclass
class ExperimentConfig:
    """Validated experiment description, JSON-shaped throughout.

    Dict-valued sections keep the exact key layout of the config file so
    that to_dict round-trips and the manifest echo stays comparable to
    what the user wrote.
    """

    surface: object = "bolza"
    degrees: tuple = ()
    sampling: dict = field(default_factory=lambda: _copy(_DEFAULTS["sampling"]))
    potential: dict | None = None
    window: dict = field(default_factory=lambda: _copy(_DEFAULTS["window"]))
    qvar: dict = field(default_factory=lambda: _copy(_DEFAULTS["qvar"]))
    flow: dict | None = None
    out: str = "out"
    verify: dict = field(default_factory=lambda: _copy(_DEFAULTS["verify"]))

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config", f"expected a JSON object, got {type(doc).__name__}")
        _reject_unknown(doc, _DEFAULTS.keys())
        merged = _merge_defaults(_DEFAULTS, doc)
        cfg = ExperimentConfig(
            surface=merged["surface"],
            degrees=tuple(merged["degrees"]) if isinstance(merged["degrees"], list) else merged["degrees"],
            sampling=merged["sampling"],
            potential=merged["potential"],
            window=merged["window"],
            qvar=merged["qvar"],
            flow=merged["flow"],
            out=merged["out"],
            verify=merged["verify"],
        )
        cfg.validate()
        return cfg

    @staticmethod
    def from_file(path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError("config", f"file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
        return ExperimentConfig.from_dict(doc)

    def validate(self) -> None:
        self._validate_surface()
        self._validate_degrees()
        self._validate_sampling()
        self._validate_potential()
        self._validate_window()
        self._validate_qvar()
        self._validate_flow()
        if not isinstance(self.out, str) or not self.out:
            raise ConfigError("out", f"expected a nonempty path string, got {self.out!r}")
        if not isinstance(self.verify, dict):
            raise ConfigError("verify", f"expected an object of toggles, got {self.verify!r}")
        _reject_unknown(self.verify, VERIFY_CHECKS.keys(), "verify.")
        for name, value in self.verify.items():
            if not isinstance(value, bool):
                raise ConfigError(f"verify.{name}", f"expected true or false, got {value!r}")

    def _validate_surface(self) -> None:
        if self.surface == "bolza":
            return
        if isinstance(self.surface, dict):
            _reject_unknown(self.surface, {"file"}, "surface.")
            raw = self.surface.get("file")
            if not isinstance(raw, str) or not raw:
                raise ConfigError("surface.file", f"expected a path string, got {raw!r}")
            if not Path(raw).exists():
                raise ConfigError("surface.file", f"file not found: {raw}")
            return
        raise ConfigError("surface", f'expected "bolza" or {{"file": path}}, got {self.surface!r}')

    def _validate_degrees(self) -> None:
        if not isinstance(self.degrees, tuple):
            raise ConfigError("degrees", f"expected a list of integers, got {self.degrees!r}")
        for i, d in enumerate(self.degrees):
            _require_int(d, f"degrees[{i}]", minimum=1)

    def _validate_sampling(self) -> None:
        s = self.sampling
        if not isinstance(s, dict):
            raise ConfigError("sampling", f"expected an object, got {s!r}")
        _reject_unknown(s, {"points_per_sheet", "seed", "eps"}, "sampling.")
        _require_int(s["points_per_sheet"], "sampling.points_per_sheet", minimum=50)
        _require_int(s["seed"], "sampling.seed", minimum=0)
        eps = s["eps"]
        if eps != "tuned":
            _require_number(eps, "sampling.eps", minimum=0.0, strict=True)

    def _validate_potential(self) -> None:
        p = self.potential
        if p is None:
            return
        if not isinstance(p, dict):
            raise ConfigError("potential", f"expected an object or null, got {p!r}")
        kind = p.get("kind")
        if not isinstance(kind, str) or not kind:
            raise ConfigError("potential.kind", f"expected a potential family name, got {kind!r}")
        if "radius" in p:
            _require_number(p["radius"], "potential.radius", minimum=0.0, strict=True)
        if "height" in p:
            _require_number(p["height"], "potential.height")
        if "center" in p:
            _check_center(p["center"], "potential.center")

    def _validate_window(self) -> None:
        w = self.window
        if not isinstance(w, dict):
            raise ConfigError("window", f"expected an object, got {w!r}")
        _reject_unknown(w, {"a", "b", "a_outer", "b_outer"}, "window.")
        a = _require_number(w["a"], "window.a", minimum=0.25, strict=True)
        b = _require_number(w["b"], "window.b")
        if a >= b:
            raise ConfigError("window.a", f"must lie below window.b, got a={a} b={b}")
        has_ao = w.get("a_outer") is not None
        has_bo = w.get("b_outer") is not None
        if has_ao != has_bo:
            raise ConfigError("window.a_outer", "outer window needs both a_outer and b_outer")
        if has_ao:
            _require_number(w["a_outer"], "window.a_outer", minimum=0.25, strict=True)
            _require_number(w["b_outer"], "window.b_outer")
        try:
            self.window_spec()
        except Exception as exc:
            raise ConfigError("window", str(exc)) from exc

    def _validate_qvar(self) -> None:
        q = self.qvar
        if not isinstance(q, dict):
            raise ConfigError("qvar", f"expected an object, got {q!r}")
        _reject_unknown(q, {"T", "tau", "delta", "observable", "normalization"}, "qvar.")
        _require_number(q["T"], "qvar.T", minimum=0.0, strict=True)
        taus = q["tau"]
        if not isinstance(taus, list) or not taus:
            raise ConfigError("qvar.tau", f"expected a nonempty list, got {taus!r}")
        for i, t in enumerate(taus):
            _require_number(t, f"qvar.tau[{i}]")
        deltas = q["delta"]
        if not isinstance(deltas, list) or not deltas:
            raise ConfigError("qvar.delta", f"expected a nonempty list, got {deltas!r}")
        for i, d in enumerate(deltas):
            _require_number(d, f"qvar.delta[{i}]", minimum=0.0, strict=True)
        obs = q["observable"]
        if not isinstance(obs, dict) or not isinstance(obs.get("kind"), str):
            raise ConfigError("qvar.observable.kind", "expected an observable family name")
        if q["normalization"] not in ("sup1_mean0", "none"):
            raise ConfigError("qvar.normalization",
                              f'expected "sup1_mean0" or "none", got {q["normalization"]!r}')

    def _validate_flow(self) -> None:
        f = self.flow
        if f is None:
            return
        if not isinstance(f, dict):
            raise ConfigError("flow", f"expected an object or null, got {f!r}")
        _reject_unknown(f, _DEFAULT_FLOW.keys(), "flow.")
        merged = _merge_defaults(_DEFAULT_FLOW, f)
        self.flow = merged
        if merged["kind"] not in ("ball", "bump"):
            raise ConfigError("flow.kind", f'expected "ball" or "bump", got {merged["kind"]!r}')
        _require_number(merged["radius"], "flow.radius", minimum=0.0, strict=True)
        centers = merged["centers"]
        if not isinstance(centers, list) or len(centers) != 2:
            raise ConfigError("flow.centers", f"expected two centers, got {centers!r}")
        for i, c in enumerate(centers):
            _check_center(c, f"flow.centers[{i}]")
        times = merged["times"]
        if not isinstance(times, list) or not times:
            raise ConfigError("flow.times", f"expected a nonempty list, got {times!r}")
        vals = [_require_number(t, f"flow.times[{i}]", minimum=0.0) for i, t in enumerate(times)]
        if vals != sorted(vals):
            raise ConfigError("flow.times", "must be ascending")
        if vals[-1] > TOTAL_CAP:
            raise ConfigError("flow.times", f"final time {vals[-1]} exceeds the flow cap {TOTAL_CAP}")
        _require_int(merged["n_samples"], "flow.n_samples", minimum=100)
        _require_int(merged["seed"], "flow.seed", minimum=0)

    def to_dict(self) -> dict:
        return {
            "surface": _copy(self.surface),
            "degrees": list(self.degrees),
            "sampling": _copy(self.sampling),
            "potential": _copy(self.potential),
            "window": _copy(self.window),
            "qvar": _copy(self.qvar),
            "flow": _copy(self.flow),
            "out": self.out,
            "verify": _copy(self.verify),
        }

    def window_spec(self) -> WindowSpec:
        w = self.window
        if w.get("a_outer") is None:
            return WindowSpec(float(w["a"]), float(w["b"]))
        return WindowSpec(float(w["a"]), float(w["b"]),
                          float(w["a_outer"]), float(w["b_outer"]))

    def eps(self) -> float:
        if self.sampling["eps"] == "tuned":
            return 0.25 * math.sqrt(BASE_AREA / self.sampling["points_per_sheet"])
        return float(self.sampling["eps"])

    def base_group(self):
        if self.surface == "bolza":
            return bolza_group()
        loaded = load_surface(self.surface["file"])
        if isinstance(loaded, CoverDescriptor):
            return loaded.base
        return loaded

    def qvar_config(self, tau: float, delta: float) -> QVarConfig:
        return QVarConfig(
            window=self.window_spec(),
            tau=float(tau),
            delta=float(delta),
            T=float(self.qvar["T"]),
            observable=_copy(self.qvar["observable"]),
            normalization=self.qvar["normalization"],
            points_per_sheet=self.sampling["points_per_sheet"],
        )

    def potential_vector(self, cover, sample):
        """Config potential evaluated on a sample; zeros when unset."""
        if self.potential is None:
            return np.zeros(sample.n_points)
        params = {k: _copy(v) for k, v in self.potential.items() if k != "kind"}
        if "center" in params:
            params["center"] = _as_surface_point(params["center"])
        pot = make_potential(self.potential["kind"], params, cover)
        return pot.evaluate(sample)


# ---------------------------------------------------------------------------
# Artifact files


def _cover_path(out: Path, tag: str) -> Path:
    return out / f"cover_{tag}.json"


def _sample_path(out: Path, tag: str) -> Path:
    return out / f"sample_{tag}.json"


def _spectra_path(out: Path, tag: str) -> Path:
    return out / f"spectra_{tag}.json"


def save_sample(sample: SurfaceSample, path: Path) -> list[str]:
    """Write a sample as JSON metadata plus one float64 binary sidecar.

    Integer arrays ride in the same float64 block; their values are far
    below 2^53 so the cast is exact both ways.
    """
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    arrays = {
        "base_x": sample.base_z.real,
        "base_y": sample.base_z.imag,
        "sheets": sample.sheets,
        "rows": sample.rows,
        "cols": sample.cols,
        "dvals": sample.dvals,
    }
    blob = np.concatenate([np.ascontiguousarray(arrays[k], dtype="<f8") for k in _SAMPLE_ARRAYS])
    bin_path.write_bytes(blob.tobytes())
    doc = {
        "lengths": {k: int(len(arrays[k])) for k in _SAMPLE_ARRAYS},
        "cutoff": float(sample.cutoff),
        "nn_scale": float(sample.nn_scale),
        "points_per_sheet": int(sample.points_per_sheet),
        "seed": int(sample.seed),
        "fingerprint": sample.cover.fingerprint(),
        "bin": bin_path.name,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return [path.name, bin_path.name]


def load_sample(path: Path, cover) -> SurfaceSample:
    path = Path(path)
    doc = json.loads(path.read_text())
    cover = as_cover(cover)
    if doc["fingerprint"] != cover.fingerprint():
        raise HyperwaveError(
            f"sample {path.name} was drawn from a different cover than the one supplied")
    raw = np.frombuffer((path.parent / doc["bin"]).read_bytes(), dtype="<f8")
    parts = {}
    offset = 0
    for name in _SAMPLE_ARRAYS:
        n = doc["lengths"][name]
        parts[name] = raw[offset:offset + n]
        offset += n
    if offset != len(raw):
        raise HyperwaveError(f"sample sidecar {doc['bin']} length does not match its metadata")
    return SurfaceSample(
        cover=cover,
        base_z=parts["base_x"] + 1j * parts["base_y"],
        sheets=parts["sheets"].astype(np.int64),
        rows=parts["rows"].astype(np.int64),
        cols=parts["cols"].astype(np.int64),
        dvals=parts["dvals"].copy(),
        cutoff=float(doc["cutoff"]),
        nn_scale=float(doc["nn_scale"]),
        points_per_sheet=int(doc["points_per_sheet"]),
        seed=int(doc["seed"]),
    )


def _require_artifact(path: Path, stage: str, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"stage '{stage}' expects {path}; run '{producer}' first")
    return path


def _load_cover(out: Path, tag: str, stage: str) -> CoverDescriptor:
    path = _require_artifact(_cover_path(out, tag), stage, "build-cover")
    return as_cover(load_surface(path))


def _load_sample(out: Path, tag: str, cover, stage: str) -> SurfaceSample:
    path = _require_artifact(_sample_path(out, tag), stage, "sample")
    return load_sample(path, cover)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "hyperwave": __version__,
    }


def _update_manifest(out: Path, cfg: ExperimentConfig, new_files) -> None:
    """Record content hashes for every artifact the run has produced."""
    man = out / MANIFEST_NAME
    if man.exists():
        doc = json.loads(man.read_text())
    else:
        doc = {"outputs": {}}
    doc["config"] = cfg.to_dict()
    doc["versions"] = _versions()
    for name in new_files:
        p = out / name
        doc["outputs"][name] = {"sha256": _sha256(p), "bytes": p.stat().st_size}
    man.write_text(json.dumps(doc, indent=1, sort_keys=True))


def _merge_verification(out: Path, records) -> None:
    """Fold this run's check records into the log, keyed by check name."""
    path = out / VERIFICATION_NAME
    merged = {}
    if path.exists():
        for rec in json.loads(path.read_text())["records"]:
            merged[rec["name"]] = rec
    for rec in records:
        merged[rec["name"]] = rec
    ordered = [merged[k] for k in sorted(merged)]
    doc = {"passed": all(r["passed"] for r in ordered), "records": ordered}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


@contextmanager
def _locked(out: Path):
    """One experiment per output directory, enforced by an exclusive file."""
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(
            f"output directory {out} is locked by another run; remove {lock} if it is stale")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Verification runner


def _check_counting() -> tuple[bool, dict]:
    """Ball counts on the base surface and a degree-2 cover against e^(t+1)/r^2.

    Each pair enumerates one ball at the largest radius; smaller radii are
    counted by filtering the recorded distances. The packing radius r uses
    the injectivity radius at the ball's lattice-translated point, which is
    where the disjoint-ball argument behind the bound lives.
    """
    base = bolza_group()
    surfaces = [("bolza", base, 1), ("cyclic2", cyclic_cover(base, 2), 2)]
    rng = np.random.default_rng(VERIFY_SEED)
    pts = sample_domain(base, 2 * COUNT_PAIRS, rng)
    worst = 0.0
    balls = 0
    for name, surface, degree in surfaces:
        for k in range(COUNT_PAIRS):
            x = HPoint(pts[2 * k].real, pts[2 * k].imag)
            y = HPoint(pts[2 * k + 1].real, pts[2 * k + 1].imag)
            sx = int(rng.integers(degree))
            sy = int(rng.integers(degree))
            ball = enumerate_ball(surface, x, y, COUNT_RADIUS)
            if degree == 1:
                dists = list(ball.distances)
                inj = injectivity_radius(surface, y)
            else:
                dists = [d for _, d in ball.connecting(sx, sy)]
                inj = injectivity_radius(surface, y, sheet=sy)
            balls += 1
            for t in COUNT_TIMES:
                count = sum(1 for d in dists if d <= t)
                worst = max(worst, count / counting_bound(t, inj))
    detail = {
        "surfaces": [name for name, _, _ in surfaces],
        "pairs": COUNT_PAIRS,
        "radii": list(COUNT_TIMES),
        "balls": balls,
        "worst_count_over_bound": worst,
    }
    return worst <= 1.0, detail


def _check_duhamel() -> tuple[bool, dict]:
    """Perturbation-identity residual on random dense instances.

    The free and perturbed propagators and the quadrature correction must
    cancel to near machine level, and doubling the quadrature order must
    not make the residual worse.
    """
    rng = np.random.default_rng(VERIFY_SEED + 1)
    worst = 0.0
    worst_double = 0.0
    shrink_violations = 0
    for _ in range(DUHAMEL_INSTANCES):
        A = rng.normal(size=(DUHAMEL_SIZE, DUHAMEL_SIZE))
        H0 = (A + A.T) / 2 + 3.0 * np.eye(DUHAMEL_SIZE)
        V = rng.uniform(-1.0, 1.0, size=DUHAMEL_SIZE)
        P = PropagatorSet(H0, V)
        gap = propagate(P, "potential", DUHAMEL_TIME) - propagate(P, "free", DUHAMEL_TIME)
        res = hs_norm(gap + duhamel_Q(P, DUHAMEL_TIME, DUHAMEL_ORDER))
        res2 = hs_norm(gap + duhamel_Q(P, DUHAMEL_TIME, 2 * DUHAMEL_ORDER))
        worst = max(worst, res)
        worst_double = max(worst_double, res2)
        if res2 > res + 1e-14:
            shrink_violations += 1
    detail = {
        "instances": DUHAMEL_INSTANCES,
        "size": DUHAMEL_SIZE,
        "order": DUHAMEL_ORDER,
        "time": DUHAMEL_TIME,
        "worst_residual": worst,
        "worst_residual_doubled_order": worst_double,
        "shrink_violations": shrink_violations,
    }
    return worst <= DUHAMEL_TOL and shrink_violations == 0, detail


def _check_scalar() -> tuple[bool, dict]:
    """Time-averaged squared multiplier floor on the low spectral band."""
    grid = np.linspace(0.5, 1.0, SCALAR_POINTS)
    vals = time_avg_h2(grid, SCALAR_HORIZON)
    lowest = float(vals.min())
    detail = {
        "grid_points": SCALAR_POINTS,
        "horizon": SCALAR_HORIZON,
        "floor": SCALAR_FLOOR,
        "min_value": lowest,
        "argmin": float(grid[int(vals.argmin())]),
    }
    return lowest >= SCALAR_FLOOR, detail


def _check_integrals() -> tuple[bool, dict]:
    """Closed-form upper bounds for the three kernel integrals on fixed grids."""
    worst = -math.inf
    evaluations = 0

    def track(lhs, rhs):
        nonlocal worst, evaluations
        worst = max(worst, lhs - rhs)
        evaluations += 1

    for t in GRID_TIMES:
        for tp in GRID_TIMES:
            for d in GRID_DISTS:
                lens = lens_integral(t, tp, d)
                if d > t + tp:
                    track(abel_overlap(t, tp, d), 0.0)
                    track(lens, 0.0)
                    continue
                track(lens, 4.0 * math.pi * min(t, tp) + INTEGRAL_SLACK)
                m = max(abs(t - tp), d)
                if m == 0.0:
                    continue
                lhs = abel_overlap(t, tp, d)
                track(lhs, 1.0 / math.sqrt(math.sinh(m)) + INTEGRAL_SLACK)
                track(lhs * lhs, 1.0 / math.sinh(m) + INTEGRAL_SLACK)
    for t, tp in DECAY_PAIRS:
        for beta in DECAY_BETAS:
            lhs = f_decay_integral(t, tp, beta)
            rhs = 4.0 / beta**2 * math.exp(-beta / 4.0 * (t - tp))
            track(lhs, rhs + INTEGRAL_SLACK)
    detail = {"evaluations": evaluations, "worst_margin": worst, "slack": INTEGRAL_SLACK}
    return worst <= 0.0, detail


VERIFY_CHECKS = {
    "counting": _check_counting,
    "duhamel": _check_duhamel,
    "scalar": _check_scalar,
    "integrals": _check_integrals,
}


def run_verification(names) -> list[dict]:
    records = []
    for name in names:
        if name not in VERIFY_CHECKS:
            raise ConfigError("only", f"unknown check {name!r}; choose from "
                              + ", ".join(VERIFY_CHECKS))
        passed, detail = VERIFY_CHECKS[name]()
        records.append({"name": name, "passed": bool(passed), "detail": detail})
    return records


# ---------------------------------------------------------------------------
# Pipeline stages


def stage_build_cover(cfg: ExperimentConfig, out: Path) -> list[str]:
    base = cfg.base_group()
    written = []
    save_surface(trivial_cover(base), _cover_path(out, "base"))
    written.append(_cover_path(out, "base").name)
    for d in cfg.degrees:
        cover = trivial_cover(base) if d == 1 else cyclic_cover(base, d)
        path = _cover_path(out, f"deg{d}")
        save_surface(cover, path)
        written.append(path.name)
    return written


def _stage_tags(cfg: ExperimentConfig):
    """(tag, seed) pairs: base first, then one per configured degree."""
    seed = cfg.sampling["seed"]
    tags = [("base", seed)]
    tags += [(f"deg{d}", seed + i) for i, d in enumerate(cfg.degrees)]
    return tags


def stage_sample(cfg: ExperimentConfig, out: Path) -> list[str]:
    written = []
    pps = cfg.sampling["points_per_sheet"]
    eps = cfg.eps()
    for tag, seed in _stage_tags(cfg):
        cover = _load_cover(out, tag, "sample")
        sample = sample_surface(cover, pps, seed=seed, eps=eps)
        written += save_sample(sample, _sample_path(out, tag))
    return written


def stage_eigensolve(cfg: ExperimentConfig, out: Path) -> list[str]:
    written = []
    window = cfg.window_spec()
    eps = cfg.eps()
    cover = _load_cover(out, "base", "eigensolve")
    sample = _load_sample(out, "base", cover, "eigensolve")
    H0 = assemble_operator(sample, None, eps)
    S0 = solve_window(H0, window, sample.weight)
    free_path = _spectra_path(out, "free")
    S0.to_json(free_path)
    written.append(free_path.name)
    for tag, _ in _stage_tags(cfg)[1:]:
        cover = _load_cover(out, tag, "eigensolve")
        sample = _load_sample(out, tag, cover, "eigensolve")
        v = cfg.potential_vector(cover, sample)
        HV = assemble_operator(sample, v, eps)
        S = solve_window(HV, window, sample.weight)
        path = _spectra_path(out, tag)
        S.to_json(path, path.with_suffix(".bin"))
        written += [path.name, path.with_suffix(".bin").name]
    return written


def stage_qvar(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[dict]]:
    if not cfg.degrees:
        raise ConfigError("degrees", "at least one cover degree is needed for the qvar stage")
    window = cfg.window_spec()
    eps = cfg.eps()
    taus = [float(t) for t in cfg.qvar["tau"]]
    deltas = [float(d) for d in cfg.qvar["delta"]]
    pot_kind = cfg.potential["kind"] if cfg.potential else "none"
    reports = []
    primaries = []
    records = []
    for tag, seed in _stage_tags(cfg)[1:]:
        cover = _load_cover(out, tag, "qvar")
        sample = _load_sample(out, tag, cover, "qvar")
        spath = _require_artifact(_spectra_path(out, tag), "qvar", "eigensolve")
        S = SpectralData.from_json(spath)
        v = cfg.potential_vector(cover, sample)
        H0 = assemble_operator(sample, None, eps)
        a = build_observable(cover, sample, cfg.qvar["observable"], cfg.qvar["normalization"])

        # The bound chain's resonance hypothesis caps the band half-width at
        # (2/9)sqrt(a_outer - 1/4); check at the widest admissible grid delta.
        # An empty admissible set falls through so the chain raises its own
        # error naming the hypothesis.
        cap = (2.0 / 9.0) * math.sqrt((window.a_outer or window.a) - 0.25)
        admissible = [d for d in deltas if d < cap]
        check_delta = max(admissible) if admissible else deltas[0]
        qcfg = cfg.qvar_config(taus[0], check_delta)
        chain = bound_chain_check(S, PropagatorSet(H0, v), a, qcfg)
        lhs, rhs = windowed_mass_check(S, a, window)
        bands = band_decomposition_check(S, a, window, check_delta)
        d = cover.degree
        records.append({
            "name": f"qvar.ceiling.deg{d}",
            "passed": bool(lhs <= rhs + IDENTITY_TOL),
            "detail": {"lhs": float(lhs), "rhs": float(rhs), "tolerance": IDENTITY_TOL},
        })
        records.append({
            "name": f"qvar.bands.deg{d}",
            "passed": bool(bands["residual"] <= IDENTITY_TOL),
            "detail": {"residual": float(bands["residual"]), "delta": check_delta,
                       "tolerance": IDENTITY_TOL},
        })

        sum1 = diagonal_variance(S, a, window)
        for ti, tau in enumerate(taus):
            for di, delta in enumerate(deltas):
                metadata = {}
                if ti == 0 and di == 0:
                    metadata = {
                        "points_per_sheet": cfg.sampling["points_per_sheet"],
                        "bound_chain": chain,
                        "mass_lhs": lhs,
                        "mass_rhs": rhs,
                        "band_residual": bands["residual"],
                    }
                rep = QVarReport(
                    degree=cover.degree,
                    genus=cover.genus,
                    count=S.count,
                    sum1=sum1,
                    sum2=offdiag_variance(S, a, window, 0.0, delta),
                    sum3=offdiag_variance(S, a, window, tau, delta),
                    majorant=chain["majorant"],
                    tau=tau,
                    delta=delta,
                    T=float(cfg.qvar["T"]),
                    potential_kind=pot_kind,
                    seed=seed,
                    normalization=cfg.qvar["normalization"],
                    metadata=metadata,
                )
                reports.append(rep)
                if ti == 0 and di == 0:
                    primaries.append(rep)
    spearman = trend_statistic(primaries) if len(primaries) >= 2 else math.nan
    for rep in primaries:
        rep.metadata["spearman"] = spearman
    write_qvar_csv(out / "qvar.csv", reports)
    write_qvar_json(out / "qvar.json", reports)
    return ["qvar.csv", "qvar.json"], records


def stage_mixing(cfg: ExperimentConfig, out: Path) -> tuple[list[str], list[dict]]:
    if cfg.flow is None:
        raise ConfigError("flow", "section required for the mixing stage")
    spath = _require_artifact(_spectra_path(out, "free"), "mixing", "eigensolve")
    S0 = SpectralData.from_json(spath)
    lams = np.sort(np.asarray(S0.all_eigenvalues, dtype=float))
    if len(lams) < 2:
        raise HyperwaveError(f"free spectrum in {spath.name} is too small for a bottom estimate")
    lam1 = float(lams[1])
    flow = cfg.flow
    times = [float(t) for t in flow["times"]]
    params = MixingParams(lam1, times=tuple(times))
    cover = trivial_cover(cfg.base_group())
    maker = ball_indicator if flow["kind"] == "ball" else bump_observable
    f = maker(cover, _as_surface_point(flow["centers"][0]), float(flow["radius"]))
    g = maker(cover, _as_surface_point(flow["centers"][1]), float(flow["radius"]))
    rows = correlation_curve(cover, f, g, times, flow["n_samples"], flow["seed"], params=params)
    write_decay_csv(out / "mixing.csv", rows)
    checked = [r for r in rows if math.isfinite(r["bound"])]
    ratios = [abs(r["estimate"]) / (r["bound"] + 3.0 * r["stderr"]) for r in checked]
    worst = max(ratios) if ratios else 0.0
    records = [{
        "name": "mixing.envelope",
        "passed": bool(worst <= 1.0),
        "detail": {
            "lam1": lam1,
            "beta": params.beta,
            "rows": len(rows),
            "n_samples": flow["n_samples"],
            "worst_estimate_over_envelope": worst,
        },
    }]
    return ["mixing.csv"], records


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def stage_report(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Merge the tabular outputs into one summary keyed by cover degree."""
    sources = {}
    qvar_rows = []
    if cfg.degrees:
        qpath = _require_artifact(out / "qvar.csv", "report", "qvar")
        qvar_rows = _read_csv(qpath)
        sources["qvar"] = qpath.name
    mixing_rate = ""
    mixing_worst = ""
    if cfg.flow is not None:
        mpath = _require_artifact(out / "mixing.csv", "report", "mixing")
        sources["mixing"] = mpath.name
        mrows = []
        for raw in _read_csv(mpath):
            mrows.append({
                "t": float(raw["t"]),
                "estimate": float(raw["estimate"]),
                "stderr": float(raw["stderr"]),
                "bound": float(raw["bound"]),
                "resolved": raw["resolved"] == "true",
            })
        checked = [r for r in mrows if math.isfinite(r["bound"])]
        ratios = [abs(r["estimate"]) / (r["bound"] + 3.0 * r["stderr"]) for r in checked]
        mixing_worst = repr(max(ratios)) if ratios else ""
        try:
            mixing_rate = repr(fit_decay_rate(mrows))
        except ValueError:
            mixing_rate = ""
    if not sources:
        raise MissingArtifact(
            f"stage 'report' expects {out / 'qvar.csv'}; nothing is configured to merge")

    primary = {}
    for row in qvar_rows:
        primary.setdefault(int(row["degree"]), row)
    degrees = sorted(primary)
    spearman = ""
    if len(degrees) >= 2:
        shim = [SimpleNamespace(degree=d, sum1=float(primary[d]["sum1"])) for d in degrees]
        spearman = repr(trend_statistic(shim))

    header = ["degree", "genus", "N", "sum1", "sum2", "sum3", "tau", "delta",
              "spearman", "mixing_rate", "mixing_worst"]
    table = []
    if degrees:
        for d in degrees:
            row = primary[d]
            table.append([
                row["degree"], row["genus"], row["N"], row["sum1"], row["sum2"],
                row["sum3"], row["tau"], row["delta"], spearman, mixing_rate, mixing_worst,
            ])
    else:
        table.append(["1", "2", "", "", "", "", "", "", spearman, mixing_rate, mixing_worst])
    with (out / "report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(table)
    doc = {
        "sources": sources,
        "rows": [dict(zip(header, row)) for row in table],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return ["report.csv", "report.json"]


# ---------------------------------------------------------------------------
# Orchestration


def _print_records(records) -> None:
    for rec in records:
        status = "pass" if rec["passed"] else "FAIL"
        keys = ", ".join(f"{k}={v}" for k, v in rec["detail"].items()
                         if isinstance(v, (int, float)) and not isinstance(v, bool))
        print(f"  {rec['name']}: {status} ({keys})")


def run(cfg: ExperimentConfig) -> int:
    """Full experiment: verification suite, then every configured stage."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with _locked(out):
        records = []
        enabled = [name for name in VERIFY_CHECKS if cfg.verify.get(name)]
        if enabled:
            print("verification checks:")
            checks = run_verification(enabled)
            _print_records(checks)
            records += checks
        pipeline = bool(cfg.degrees) or cfg.flow is not None
        if pipeline:
            for stage, label in ((stage_build_cover, "build-cover"),
                                 (stage_sample, "sample"),
                                 (stage_eigensolve, "eigensolve")):
                written = stage(cfg, out)
                _update_manifest(out, cfg, written)
                print(f"{label}: wrote {len(written)} file(s)")
        if cfg.degrees:
            written, qrecords = stage_qvar(cfg, out)
            _update_manifest(out, cfg, written)
            print("qvar:")
            _print_records(qrecords)
            records += qrecords
        if cfg.flow is not None:
            written, mrecords = stage_mixing(cfg, out)
            _update_manifest(out, cfg, written)
            print("mixing:")
            _print_records(mrecords)
            records += mrecords
        if pipeline:
            written = stage_report(cfg, out)
            _update_manifest(out, cfg, written)
        _merge_verification(out, records)
        _update_manifest(out, cfg, [VERIFICATION_NAME])
        failed = [r["name"] for r in records if not r["passed"]]
        if failed:
            print(f"FAILED checks: {', '.join(failed)}")
            return 1
        return 0


def _cmd_run(cfg: ExperimentConfig, args) -> int:
    return run(cfg)


def _cmd_verify(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.only is not None:
        names = [args.only]
    else:
        names = [name for name in VERIFY_CHECKS if cfg.verify.get(name)]
        if not names:
            names = list(VERIFY_CHECKS)
    with _locked(out):
        records = run_verification(names)
        _print_records(records)
        _merge_verification(out, records)
        _update_manifest(out, cfg, [VERIFICATION_NAME])
    return 0 if all(r["passed"] for r in records) else 1


def _make_stage_command(stage):
    def handler(cfg: ExperimentConfig, args) -> int:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with _locked(out):
            written = stage(cfg, out)
            _update_manifest(out, cfg, written)
            for name in written:
                print(f"wrote {out / name}")
        return 0
    return handler


def _make_checked_stage_command(stage):
    def handler(cfg: ExperimentConfig, args) -> int:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with _locked(out):
            written, records = stage(cfg, out)
            _update_manifest(out, cfg, written)
            for name in written:
                print(f"wrote {out / name}")
            _print_records(records)
            _merge_verification(out, records)
            _update_manifest(out, cfg, [VERIFICATION_NAME])
        return 0 if all(r["passed"] for r in records) else 1
    return handler


def _parse_degrees(raw: str):
    try:
        return [int(part) for part in raw.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError("degrees", f"expected a comma-separated integer list, got {raw!r}")


def _set_threads(n: int) -> None:
    # BLAS and OpenMP pools created after this point honor the cap; the
    # value is also recorded in the manifest via the environment of the run.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperwave",
        description="Spectral and dynamical experiments on hyperbolic surfaces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "run": "verification suite plus every configured pipeline stage",
        "verify-lemmas": "run the inequality checks only",
        "build-cover": "write the base surface and cover descriptions",
        "sample": "draw area-uniform samples for each configured cover",
        "eigensolve": "assemble operators and solve the spectral window",
        "qvar": "variance sums and bound chain from saved spectra",
        "mixing": "geodesic-flow correlation decay on the base surface",
        "report": "merge the tabular outputs into one summary",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", default=None,
                       help="JSON experiment config; defaults apply when omitted")
        p.add_argument("--out", metavar="DIR", default=None,
                       help="output directory, overriding the config")
        p.add_argument("--seed", metavar="N", type=int, default=None,
                       help="sampling seed, overriding the config")
        p.add_argument("--degrees", metavar="LIST", default=None,
                       help="comma-separated cover degrees, overriding the config")
        p.add_argument("--threads", metavar="N", type=int, default=None,
                       help="cap for BLAS/OpenMP thread pools")
        if name == "verify-lemmas":
            p.add_argument("--only", metavar="NAME", default=None,
                           help="run a single named check")
    return parser


_COMMANDS = {
    "run": _cmd_run,
    "verify-lemmas": _cmd_verify,
    "build-cover": _make_stage_command(stage_build_cover),
    "sample": _make_stage_command(stage_sample),
    "eigensolve": _make_stage_command(stage_eigensolve),
    "qvar": _make_checked_stage_command(stage_qvar),
    "mixing": _make_checked_stage_command(stage_mixing),
    "report": _make_stage_command(stage_report),
}


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig.from_dict({})
    doc = cfg.to_dict()
    if args.out is not None:
        doc["out"] = args.out
    if args.seed is not None:
        doc["sampling"]["seed"] = args.seed
    if args.degrees is not None:
        doc["degrees"] = _parse_degrees(args.degrees)
    return ExperimentConfig.from_dict(doc)


def _provenance(exc: BaseException) -> str:
    mod = "hyperwave"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("hyperwave"):
            mod = name
        tb = tb.tb_next
    return mod


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("threads", f"must be at least 1, got {args.threads}")
            _set_threads(args.threads)
        cfg = _load_config(args)
        return _COMMANDS[args.command](cfg, args)
    except HyperwaveError as exc:
        origin = _provenance(exc)
        print(f"error[{origin}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
