"""Point-cloud files, synthetic benchmark instances and run reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike

from .geom import Alignment, Array, as_cloud, axis_rotation, random_rotation

SCHEMA_VERSION = 1


class CloudFormatError(ValueError):
    """A point-cloud file that does not parse."""


def _finite_row(values: list[float], where: str) -> list[float]:
    if not all(math.isfinite(v) for v in values):
        raise CloudFormatError(f"non-finite value at {where}")
    return values


def load_csv(path: str | Path) -> Array:
    rows: list[list[float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: {exc}") from None
            if rows and len(values) != len(rows[0]):
                raise CloudFormatError(
                    f"{path}:{lineno}: expected {len(rows[0])} fields, got {len(values)}"
                )
            rows.append(_finite_row(values, f"{path}:{lineno}"))
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def load_ply(path: str | Path) -> Array:
    """ASCII PLY vertices (x, y, z); other elements and properties are skipped."""
    with open(path, encoding="utf-8", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudFormatError(f"{path}: missing 'ply' magic line")
    elements: list[tuple[str, int, list[str]]] = []
    body = None
    for i, raw in enumerate(lines[1:], 1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise CloudFormatError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise CloudFormatError(f"{path}:{i + 1}: malformed element line")
            try:
                elements.append((tok[1], int(tok[2]), []))
            except ValueError:
                raise CloudFormatError(f"{path}:{i + 1}: bad element count") from None
        elif tok[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}:{i + 1}: property before element")
            elements[-1][2].append(tok[-1] if tok[1] != "list" else "__list__")
        elif tok[0] == "end_header":
            body = i + 1
            break
        else:
            raise CloudFormatError(f"{path}:{i + 1}: unexpected header line {raw!r}")
    if body is None:
        raise CloudFormatError(f"{path}: missing end_header")
    data = [ln for ln in lines[body:] if ln.strip()]
    pos = 0
    for name, count, props in elements:
        if name != "vertex":
            pos += count
            continue
        try:
            cols = [props.index(a) for a in ("x", "y", "z")]
        except ValueError:
            raise CloudFormatError(f"{path}: vertex element lacks x/y/z") from None
        if "__list__" in props:
            raise CloudFormatError(f"{path}: list properties on vertices are unsupported")
        if pos + count > len(data):
            raise CloudFormatError(f"{path}: expected {count} vertices, file is short")
        out = np.empty((count, 3))
        for k in range(count):
            tok = data[pos + k].split()
            if len(tok) != len(props):
                raise CloudFormatError(f"{path}: vertex {k} has {len(tok)} values")
            try:
                out[k] = _finite_row([float(tok[c]) for c in cols], f"vertex {k}")
            except ValueError:
                raise CloudFormatError(f"{path}: vertex {k} is not numeric") from None
        return out
    raise CloudFormatError(f"{path}: no vertex element")


def _format_of(path: Path, fmt: str | None) -> str:
    fmt = fmt or ("ply" if path.suffix.lower() == ".ply" else "csv")
    if fmt in ("ply", "ply-ascii"):
        return "ply"
    if fmt == "csv":
        return "csv"
    raise ValueError(f"unknown cloud format {fmt!r}")


def load_cloud(path: str | Path, fmt: str | None = None) -> Array:
    path = Path(path)
    return load_ply(path) if _format_of(path, fmt) == "ply" else load_csv(path)


def save_cloud(cloud: ArrayLike, path: str | Path, fmt: str | None = None) -> None:
    X = as_cloud(cloud)
    path = Path(path)
    if _format_of(path, fmt) == "csv":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in X:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return
    if X.shape[1] != 3:
        raise ValueError("PLY output needs 3-D points")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {X.shape[0]}\n")
        fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for row in X:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def normalize_to_cube(cloud: ArrayLike) -> Array:
    """Center the bounding box at the origin and scale uniformly to half-extent 0.5."""
    X = as_cloud(cloud)
    if X.shape[0] == 0:
        raise ValueError("cannot normalize an empty cloud")
    lo, hi = X.min(axis=0), X.max(axis=0)
    centered = X - 0.5 * (lo + hi)
    half = 0.5 * float((hi - lo).max())
    if half == 0.0:
        return centered
    return centered * (0.5 / half)


@dataclass(frozen=True)
class InstanceSpec:
    n: int
    d: int = 3
    sigma2: float = 0.0
    source: str | None = None  # point-cloud file; None for the uniform cube
    translation_bound: float = 0.1
    shuffle: bool = False
    outlier_fraction: float = 0.0
    outlier_sigma2: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d < 2:
            raise ValueError("dimension must be at least 2")
        if self.n < self.d:
            raise ValueError("need n >= d")
        if self.sigma2 < 0 or self.outlier_sigma2 < 0:
            raise ValueError("variances must be nonnegative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier fraction must lie in [0, 1)")
        if self.translation_bound < 0:
            raise ValueError("translation bound must be nonnegative")


@dataclass(frozen=True)
class GeneratedInstance:
    """``P`` is ``Q`` moved by ``true_alignment``, then perturbed and optionally shuffled.

    ``P[i]`` corresponds to ``Q[true_matching[i]]``; :attr:`recovery` maps P back onto Q.
    """

    P: Array
    Q: Array
    true_alignment: Alignment
    true_matching: Array
    outlier_indices: Array

    @property
    def recovery(self) -> Alignment:
        return self.true_alignment.inverse()


def _sample_rotation(d: int, rng: np.random.Generator) -> Array:
    if d == 2:
        return axis_rotation(2, 0, 1, rng.uniform(-np.pi, np.pi))
    if d == 3:
        ax, ay, az = rng.uniform(-np.pi, np.pi, size=3)
        return axis_rotation(3, 0, 1, az) @ axis_rotation(3, 2, 0, ay) @ axis_rotation(3, 1, 2, ax)
    return random_rotation(d, rng)


def _sample_ball(d: int, radius: float, rng: np.random.Generator) -> Array:
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return v * radius * rng.random() ** (1.0 / d)


def generate_instance(spec: InstanceSpec) -> GeneratedInstance:
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n, spec.d
    if spec.source is None:
        Q = rng.uniform(-0.5, 0.5, size=(n, d))
    else:
        model = normalize_to_cube(load_cloud(spec.source))
        if model.shape[1] != d:
            raise ValueError(f"model is {model.shape[1]}-D but the instance asks for d={d}")
        if n > model.shape[0]:
            raise ValueError(f"model has {model.shape[0]} vertices, cannot sample {n}")
        Q = model[rng.choice(model.shape[0], size=n, replace=False)]
    R = _sample_rotation(d, rng)
    t = _sample_ball(d, spec.translation_bound, rng)
    truth = Alignment(R, t)
    P = truth.apply(Q)
    if spec.sigma2 > 0:
        P = P + rng.normal(0.0, math.sqrt(spec.sigma2), size=P.shape)
    k = int(round(spec.outlier_fraction * n))
    outliers = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, np.int64)
    if k and spec.outlier_sigma2 > 0:
        P[outliers] += rng.normal(0.0, math.sqrt(spec.outlier_sigma2), size=(k, d))
    matching = np.arange(n)
    if spec.shuffle:
        matching = rng.permutation(n)
        P = P[matching]
        is_out = np.zeros(n, dtype=bool)
        is_out[outliers] = True
        outliers = np.flatnonzero(is_out[matching])
    return GeneratedInstance(P, Q, truth, matching, outliers.astype(np.int64))


@dataclass
class RunReport:
    algorithm: str
    instance: dict
    cost_spec: str
    rotation: list[list[float]]
    translation: list[float]
    cost: float
    candidates_evaluated: int = 0
    wall_time_seconds: float = 0.0
    seed: int | None = None
    matching: list[int] | str | None = None
    optimal_ssd_cost: float | None = None
    ratio: float | None = None
    permutation_recovery: float | None = None
    label: str | None = None
    extra: dict = field(default_factory=dict)
    schema: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.optimal_ssd_cost is not None and self.optimal_ssd_cost > 0:
            if self.ratio is None:
                self.ratio = self.cost / self.optimal_ssd_cost
        else:
            self.ratio = None

    @property
    def alignment(self) -> Alignment:
        return Alignment(np.array(self.rotation), np.array(self.translation))

    def to_dict(self, include_time: bool = True) -> dict:
        out = asdict(self)
        if not include_time:
            out.pop("wall_time_seconds")
        return out

    @classmethod
    def from_dict(cls, data: dict) -> RunReport:
        if data.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {data.get('schema')!r}")
        return cls(**data)


REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "schema", "algorithm", "instance", "cost_spec", "rotation", "translation",
        "cost", "candidates_evaluated", "wall_time_seconds", "seed",
    ],
    "properties": {
        "schema": {"const": SCHEMA_VERSION},
        "algorithm": {"type": "string"},
        "instance": {"type": "object"},
        "cost_spec": {"type": "string"},
        "rotation": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "translation": {"type": "array", "items": {"type": "number"}},
        "cost": {"type": "number", "minimum": 0},
        "matching": {
            "anyOf": [
                {"type": "null"},
                {"const": "identity"},
                {"type": "array", "items": {"type": "integer", "minimum": 0}},
            ]
        },
        "optimal_ssd_cost": {"type": ["number", "null"]},
        "ratio": {"type": ["number", "null"]},
        "permutation_recovery": {"type": ["number", "null"]},
        "candidates_evaluated": {"type": "integer", "minimum": 0},
        "wall_time_seconds": {"type": "number", "minimum": 0},
        "seed": {"type": ["integer", "null"]},
        "label": {"type": ["string", "null"]},
        "extra": {"type": "object"},
    },
}


def save_report(report: RunReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str | Path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))
