"""Build the standard figures from experiment CSV/JSON artifacts.

Four figure kinds, each a pure function of its input files: correlation
decay against its envelope, variance sums across cover degrees, windowed
eigenvalue counts against the limiting density, and band sums across the
delta scan. Schemas are checked before any drawing starts, so a failed
render never leaves a file behind.
"""
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "plots"

import matplotlib.pyplot as plt
import numpy as np
import scipy.stats

from .errors import EmptyInput, MissingInput, SchemaMismatch, SpecError

FIGURE_KINDS = ("mixing_decay", "variance_trend", "weyl_compare", "delta_scan")

REQUIRED_COLUMNS = {
    "mixing_decay": ("t", "estimate", "stderr", "bound"),
    "variance_trend": ("degree", "sum1", "sum2", "sum3"),
    "weyl_compare": ("degree", "genus", "N"),
    "delta_scan": ("degree", "delta", "sum3"),
}

# weyl_compare also reads the run manifest for the window edges
INPUT_COUNTS = {kind: (2 if kind == "weyl_compare" else 1)
                for kind in FIGURE_KINDS}

STYLE_DEFAULTS = {
    "title": None,
    "figsize": (6.4, 4.2),
    "grid": True,
}

VECTOR_SUFFIXES = (".svg", ".pdf")


@dataclass
class FigureSpec:
    """One figure request: kind, input artifacts, output path, style."""

    kind: str
    inputs: list
    output: str
    style: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FIGURE_KINDS:
            raise SpecError(
                f"unknown figure kind {self.kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
        if not isinstance(self.inputs, (list, tuple)) or not self.inputs:
            raise SpecError("inputs must be a nonempty list of paths")
        self.inputs = [Path(p) for p in self.inputs]
        want = INPUT_COUNTS[self.kind]
        if len(self.inputs) != want:
            raise SpecError(
                f"{self.kind} takes {want} input path(s), got {len(self.inputs)}")
        out = Path(self.output)
        if out.suffix not in VECTOR_SUFFIXES:
            raise SpecError(
                f"output must be a vector image ({' or '.join(VECTOR_SUFFIXES)}), "
                f"got {out.name!r}")
        unknown = set(self.style) - set(STYLE_DEFAULTS)
        if unknown:
            raise SpecError(f"unknown style option(s): {', '.join(sorted(unknown))}")
        merged = dict(STYLE_DEFAULTS)
        merged.update(self.style)
        if merged["title"] is not None and not isinstance(merged["title"], str):
            raise SpecError("style.title must be a string")
        fs = merged["figsize"]
        if (not isinstance(fs, (list, tuple)) or len(fs) != 2
                or not all(isinstance(v, (int, float)) and v > 0 for v in fs)):
            raise SpecError("style.figsize must be two positive numbers")
        merged["figsize"] = (float(fs[0]), float(fs[1]))
        if not isinstance(merged["grid"], bool):
            raise SpecError("style.grid must be a boolean")
        self.style = merged


def load_spec(path) -> FigureSpec:
    """Read a FigureSpec from a JSON file."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"spec file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("spec document must be a JSON object")
    unknown = set(doc) - {"kind", "inputs", "output", "style"}
    if unknown:
        raise SpecError(f"unknown spec field(s): {', '.join(sorted(unknown))}")
    missing = {"kind", "inputs", "output"} - set(doc)
    if missing:
        raise SpecError(f"spec needs field(s): {', '.join(sorted(missing))}")
    return FigureSpec(kind=doc["kind"], inputs=doc["inputs"],
                      output=doc["output"], style=doc.get("style", {}))


def _read_table(path: Path, kind: str) -> list[dict]:
    if not path.exists():
        raise MissingInput(f"input {path} does not exist")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames
        rows = list(reader)
    required = REQUIRED_COLUMNS[kind]
    missing = [c for c in required if columns is None or c not in columns]
    if missing:
        raise SchemaMismatch(
            f"{path.name} lacks column(s) {', '.join(missing)} required by {kind}")
    if not rows:
        raise EmptyInput(f"{path.name} has no data rows")
    return rows


def _first_per_degree(rows) -> list[dict]:
    seen = {}
    for row in rows:
        seen.setdefault(int(row["degree"]), row)
    return [seen[d] for d in seen]


def _new_axes(style):
    fig, ax = plt.subplots(figsize=style["figsize"])
    if style["grid"]:
        ax.grid(True, alpha=0.3)
    if style["title"]:
        ax.set_title(style["title"])
    return fig, ax


def _build_mixing_decay(spec: FigureSpec):
    rows = _read_table(spec.inputs[0], spec.kind)
    t = np.array([float(r["t"]) for r in rows])
    est = np.abs([float(r["estimate"]) for r in rows])
    stderr = np.array([float(r["stderr"]) for r in rows])
    bound = np.array([float(r["bound"]) for r in rows])
    fig, ax = _new_axes(spec.style)
    ax.plot(t, est, marker="o", label="measured |correlation|")
    ax.plot(t, bound, linestyle="--", label="decay envelope")
    ax.fill_between(t, 3.0 * stderr, alpha=0.2, linewidth=0,
                    label="noise floor (3 stderr)")
    ax.set_yscale("log")
    ax.set_xlabel("flow time t")
    ax.set_ylabel("correlation magnitude")
    ax.legend()
    return fig


def _trend_statistic(rows, degrees, sum1):
    for row in rows:
        value = row.get("spearman", "")
        if value not in ("", None):
            return float(value)
    if len(set(degrees)) < 2:
        return math.nan
    return float(scipy.stats.spearmanr(degrees, sum1).statistic)


def _build_variance_trend(spec: FigureSpec):
    rows = _first_per_degree(_read_table(spec.inputs[0], spec.kind))
    degrees = [int(r["degree"]) for r in rows]
    sums = {name: [float(r[name]) for r in rows]
            for name in ("sum1", "sum2", "sum3")}
    fig, ax = _new_axes(spec.style)
    labels = {"sum1": "diagonal", "sum2": "band (tau = 0)", "sum3": "band"}
    for name in ("sum1", "sum2", "sum3"):
        ax.plot(degrees, sums[name], marker="o", label=f"{name} ({labels[name]})")
    ax.set_xticks(degrees)
    ax.set_xlabel("cover degree")
    ax.set_ylabel("variance sum")
    stat = _trend_statistic(rows, degrees, sums["sum1"])
    text = "n/a" if math.isnan(stat) else f"{stat:+.2f}"
    ax.text(0.98, 0.98, f"trend statistic {text}", transform=ax.transAxes,
            ha="right", va="top")
    ax.legend()
    return fig


def _weyl_density(a: float, b: float) -> float:
    # (1/2pi) integral of tanh(pi r) r dr over the window's r range
    if not 0.25 < a <= b:
        raise SchemaMismatch(
            f"manifest window [{a}, {b}] does not sit above the continuous threshold 1/4")
    ra, rb = math.sqrt(a - 0.25), math.sqrt(b - 0.25)
    nodes, weights = np.polynomial.legendre.leggauss(96)
    r = 0.5 * (rb - ra) * nodes + 0.5 * (rb + ra)
    vals = np.tanh(np.pi * r) * r
    return float(np.sum(weights * vals) * 0.5 * (rb - ra) / (2.0 * np.pi))


def _manifest_window(path: Path) -> tuple[float, float]:
    if not path.exists():
        raise MissingInput(f"input {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(f"{path.name} is not valid JSON: {exc}") from exc
    window = doc.get("config", {}).get("window")
    if not isinstance(window, dict) or "a" not in window or "b" not in window:
        raise SchemaMismatch(f"{path.name} lacks field config.window with edges a, b")
    return float(window["a"]), float(window["b"])


def _build_weyl_compare(spec: FigureSpec):
    rows = _first_per_degree(_read_table(spec.inputs[0], spec.kind))
    a, b = _manifest_window(spec.inputs[1])
    dens = _weyl_density(a, b)
    degrees = [int(r["degree"]) for r in rows]
    counts = [int(r["N"]) for r in rows]
    volumes = [4.0 * math.pi * (int(r["genus"]) - 1) for r in rows]
    fig, ax = _new_axes(spec.style)
    ax.plot(degrees, counts, marker="o", linestyle="", label="windowed count")
    ax.plot(degrees, [dens * v for v in volumes], linestyle="--",
            label="limit density x volume")
    ax.set_xticks(degrees)
    ax.set_xlabel("cover degree")
    ax.set_ylabel(f"eigenvalue count in [{a:g}, {b:g}]")
    ax.legend()
    return fig


def _build_delta_scan(spec: FigureSpec):
    rows = _read_table(spec.inputs[0], spec.kind)
    if "tau" in rows[0]:
        tau0 = rows[0]["tau"]
        rows = [r for r in rows if r["tau"] == tau0]
    curves = {}
    for row in rows:
        curves.setdefault(int(row["degree"]), []).append(
            (float(row["delta"]), float(row["sum3"])))
    fig, ax = _new_axes(spec.style)
    for degree, pairs in curves.items():
        pairs = sorted(pairs)
        ax.plot([p[0] for p in pairs], [p[1] for p in pairs], marker="o",
                label=f"degree {degree}")
    ax.set_xlabel("band half-width delta")
    ax.set_ylabel("off-diagonal band sum")
    ax.legend()
    return fig


_BUILDERS = {
    "mixing_decay": _build_mixing_decay,
    "variance_trend": _build_variance_trend,
    "weyl_compare": _build_weyl_compare,
    "delta_scan": _build_delta_scan,
}


def build_figure(spec: FigureSpec):
    """Validate inputs and return the matplotlib Figure, without saving."""
    return _BUILDERS[spec.kind](spec)


def render(spec: FigureSpec) -> Path:
    """Build the figure and write it to the spec's output path."""
    fig = build_figure(spec)
    out = Path(spec.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"Date": None} if out.suffix == ".svg" else {"CreationDate": None}
    try:
        fig.savefig(out, metadata=metadata)
    finally:
        plt.close(fig)
    return out
