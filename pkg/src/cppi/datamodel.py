"""Core value types: labels, schemas, prediction sets, bounded functionals, datasets.

Labels are either categorical (small non-negative integer ids from a declared
alphabet) or real scalars from a declared range. A set-predictor maps a feature
vector to a :class:`PredictionSet`, which is either a finite collection of
categorical labels or a real interval. A :class:`BoundedFunctional` is a map
from labels to reals with declared bounds, evaluable pointwise and as an
infimum/supremum over a prediction set.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Union

import numpy as np

__all__ = [
    "EmptySetError",
    "SchemaError",
    "FiniteSet",
    "Interval",
    "PredictionSet",
    "LabelSchema",
    "BoundedFunctional",
    "Dataset",
    "inf_image",
    "sup_image",
    "hull_length",
    "interval_image_arrays",
    "identity_functional",
    "affine_functional",
    "indicator_functional",
]


class EmptySetError(ValueError):
    """Raised when an image is requested over an empty prediction set."""


class SchemaError(ValueError):
    """Raised when data does not match the declared label schema."""


@dataclass(frozen=True)
class FiniteSet:
    """A finite, sorted, duplicate-free set of categorical labels.

    May be empty: calibration can exclude every label, and the empty set is
    kept representable so the predictor's widening policy can act on it.
    """

    labels: tuple[int, ...]

    def __post_init__(self) -> None:
        labs = tuple(int(y) for y in self.labels)
        if any(y < 0 for y in labs):
            raise ValueError("categorical labels must be non-negative ids")
        if len(set(labs)) != len(labs) or list(labs) != sorted(labs):
            labs = tuple(sorted(set(labs)))
        object.__setattr__(self, "labels", labs)

    @property
    def is_empty(self) -> bool:
        return len(self.labels) == 0

    def contains(self, label: float) -> bool:
        return int(label) in self.labels and float(label) == int(label)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class Interval:
    """A closed real interval [lo, hi] of candidate labels, lo <= hi."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("interval endpoints must be finite")
        if self.lo > self.hi:
            raise ValueError(f"invalid interval: lo={self.lo} > hi={self.hi}")

    @property
    def is_empty(self) -> bool:
        return False

    def contains(self, label: float) -> bool:
        return self.lo <= float(label) <= self.hi

    @property
    def width(self) -> float:
        return self.hi - self.lo


PredictionSet = Union[FiniteSet, Interval]


@dataclass(frozen=True)
class LabelSchema:
    """Declared label space: a categorical alphabet or a real range.

    The alphabet (or range) is declared up front rather than inferred from
    data; the widening policy for empty prediction sets needs the full label
    space even when some labels are unseen.
    """

    kind: str  # "categorical" | "real"
    alphabet: tuple[int, ...] | None = None
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self) -> None:
        if self.kind == "categorical":
            if self.alphabet is None or len(self.alphabet) < 2:
                raise SchemaError("categorical schema needs an alphabet of size >= 2")
            object.__setattr__(self, "alphabet", tuple(sorted(set(int(a) for a in self.alphabet))))
        elif self.kind == "real":
            if self.lo is None or self.hi is None or not (self.lo < self.hi):
                raise SchemaError("real schema needs a range lo < hi")
        else:
            raise SchemaError(f"unknown label kind: {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def full_set(self) -> PredictionSet:
        """The widest representable prediction set for this label space."""
        if self.is_categorical:
            return FiniteSet(self.alphabet)
        return Interval(self.lo, self.hi)

    def validate_label(self, y: float) -> None:
        if self.is_categorical:
            if float(y) != int(y) or int(y) not in self.alphabet:
                raise SchemaError(f"label {y!r} not in declared alphabet")
        else:
            if not math.isfinite(y):
                raise SchemaError("real labels must be finite")
            if not (self.lo <= y <= self.hi):
                raise SchemaError(f"label {y!r} outside declared range [{self.lo}, {self.hi}]")

    def to_json_dict(self) -> dict:
        if self.is_categorical:
            return {"label": {"kind": "categorical", "alphabet": list(self.alphabet)}}
        return {"label": {"kind": "real", "range": [self.lo, self.hi]}}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "LabelSchema":
        spec = obj.get("label", obj)
        kind = spec.get("kind")
        if kind == "categorical":
            return cls(kind="categorical", alphabet=tuple(spec["alphabet"]))
        if kind == "real":
            lo, hi = spec["range"]
            return cls(kind="real", lo=float(lo), hi=float(hi))
        raise SchemaError(f"unknown label kind in schema: {kind!r}")

    @classmethod
    def from_json(cls, text: str) -> "LabelSchema":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class BoundedFunctional:
    """A real-valued map on labels with declared range [lower, upper].

    ``fn`` must accept numpy arrays elementwise (the built-in constructors
    below all do). ``shape`` declares how the functional behaves over an
    interval of labels and selects the inf/sup evaluation rule:

    - ``"monotone"``: extrema sit at interval endpoints.
    - ``"step"``: piecewise constant with at most one discontinuity at
      ``jump``; extrema sit at the endpoints or at the jump.
    - ``"generic"``: dense-grid fallback at ``grid_resolution`` (relative to
      the interval width).
    """

    name: str
    fn: Callable
    lower: float
    upper: float
    shape: str = "generic"
    jump: float | None = None
    grid_resolution: float = 1e-4

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lower) and math.isfinite(self.upper)):
            raise ValueError("functional bounds must be finite")
        if self.lower > self.upper:
            raise ValueError("functional bounds must satisfy lower <= upper")
        if self.shape not in ("monotone", "step", "generic"):
            raise ValueError(f"unknown shape class: {self.shape!r}")
        if self.shape == "step" and self.jump is None:
            raise ValueError("step shape requires a jump location")
        if not (0.0 < self.grid_resolution <= 0.5):
            raise ValueError("grid_resolution must lie in (0, 0.5]")

    @property
    def span(self) -> float:
        """Width of the declared range (upper - lower)."""
        return self.upper - self.lower

    def __call__(self, y):
        return self.fn(y)


def _interval_candidates(phi, s: Interval) -> np.ndarray:
    """Label values at which the functional can attain its interval extrema."""
    if phi.shape == "monotone":
        return np.array([s.lo, s.hi])
    if phi.shape == "step":
        if s.lo <= phi.jump <= s.hi:
            return np.array([s.lo, phi.jump, s.hi])
        return np.array([s.lo, s.hi])
    width = s.hi - s.lo
    if width == 0.0:
        return np.array([s.lo])
    count = int(math.ceil(1.0 / phi.grid_resolution)) + 1
    return np.linspace(s.lo, s.hi, count)


def _image_extrema(phi, s: PredictionSet) -> tuple[float, float]:
    if s.is_empty:
        raise EmptySetError("cannot take an image over an empty prediction set")
    if isinstance(s, FiniteSet):
        values = np.asarray(phi.fn(np.asarray(s.labels, dtype=float)), dtype=float)
    else:
        values = np.asarray(phi.fn(_interval_candidates(phi, s)), dtype=float)
    return float(np.min(values)), float(np.max(values))


def inf_image(phi: BoundedFunctional, s: PredictionSet) -> float:
    """Infimum of ``{phi(y) : y in s}`` for a non-empty prediction set.

    Exact for finite sets and for interval sets whose declared shape class
    matches the functional; the generic shape falls back to a dense grid.
    """
    return _image_extrema(phi, s)[0]


def sup_image(phi: BoundedFunctional, s: PredictionSet) -> float:
    """Supremum of ``{phi(y) : y in s}``; mirror of :func:`inf_image`."""
    return _image_extrema(phi, s)[1]


def hull_length(phi: BoundedFunctional, s: PredictionSet) -> float:
    """Length of the convex hull of the image, ``sup_image - inf_image``."""
    lo, hi = _image_extrema(phi, s)
    return hi - lo


def interval_image_arrays(phi: BoundedFunctional, los: np.ndarray,
                          his: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized inf/sup images of ``phi`` over per-row intervals [lo_i, hi_i].

    Same evaluation rules as :func:`inf_image` / :func:`sup_image`; the
    generic shape falls back to a per-row grid loop.
    """
    los = np.asarray(los, dtype=float)
    his = np.asarray(his, dtype=float)
    if phi.shape == "generic":
        infs = np.empty(los.shape)
        sups = np.empty(los.shape)
        for i, (a, b) in enumerate(zip(los, his)):
            infs[i], sups[i] = _image_extrema(phi, Interval(float(a), float(b)))
        return infs, sups
    vlo = np.asarray(phi.fn(los), dtype=float)
    vhi = np.asarray(phi.fn(his), dtype=float)
    infs = np.minimum(vlo, vhi)
    sups = np.maximum(vlo, vhi)
    if phi.shape == "step":
        inside = (los <= phi.jump) & (phi.jump <= his)
        if np.any(inside):
            vj = float(np.asarray(phi.fn(np.asarray(phi.jump)), dtype=float))
            infs = np.where(inside, np.minimum(infs, vj), infs)
            sups = np.where(inside, np.maximum(sups, vj), sups)
    return infs, sups


def identity_functional(lower: float, upper: float) -> BoundedFunctional:
    """phi(y) = y on a declared label range (monotone)."""
    return BoundedFunctional("identity", lambda y: np.asarray(y, dtype=float),
                             lower, upper, shape="monotone")


def affine_functional(scale: float, offset: float, lower: float, upper: float) -> BoundedFunctional:
    """phi(y) = scale * y + offset on [lower, upper] (monotone in y)."""
    a = scale * lower + offset
    b = scale * upper + offset
    return BoundedFunctional(
        f"affine({scale},{offset})",
        lambda y: scale * np.asarray(y, dtype=float) + offset,
        min(a, b), max(a, b), shape="monotone",
    )


def indicator_functional(cut: float, offset: float = 0.0) -> BoundedFunctional:
    """phi(y) = 1[y <= cut] - offset, a step functional with jump at ``cut``."""
    return BoundedFunctional(
        f"indicator(<= {cut})",
        lambda y: (np.asarray(y, dtype=float) <= cut).astype(float) - offset,
        -offset, 1.0 - offset, shape="step", jump=cut,
    )


@dataclass(frozen=True)
class Dataset:
    """Rows of (feature vector, optional label) under a fixed schema.

    Labels are stored as floats with NaN marking unlabelled rows; categorical
    ids round-trip exactly through the float representation.
    """

    features: np.ndarray
    labels: np.ndarray
    schema: LabelSchema

    def __post_init__(self) -> None:
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=float)
        if x.ndim != 2 or x.shape[1] < 1:
            raise ValueError(f"features must be a (n, d) matrix, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValueError("labels must be a vector with one entry per row")
        if not np.all(np.isfinite(x)):
            raise ValueError("features must be finite")
        for v in y[~np.isnan(y)]:
            self.schema.validate_label(float(v))
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def labelled_mask(self) -> np.ndarray:
        return ~np.isnan(self.labels)

    @property
    def labelled_features(self) -> np.ndarray:
        return self.features[self.labelled_mask]

    @property
    def labelled_labels(self) -> np.ndarray:
        return self.labels[self.labelled_mask]

    @property
    def unlabelled_features(self) -> np.ndarray:
        return self.features[~self.labelled_mask]

    @property
    def n_labelled(self) -> int:
        return int(self.labelled_mask.sum())

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(self.dim)] + ["y"])
            for i in range(self.n):
                y = self.labels[i]
                if math.isnan(y):
                    ytxt = ""
                elif self.schema.is_categorical:
                    ytxt = str(int(y))
                else:
                    ytxt = repr(float(y))
                writer.writerow([repr(float(v)) for v in self.features[i]] + [ytxt])

    @classmethod
    def from_csv(cls, path: str, schema: LabelSchema) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV") from None
            header = [h.strip() for h in header]
            if not header or header[-1] != "y":
                raise ValueError(f"{path}: last column must be 'y'")
            d = len(header) - 1
            expected = [f"x{j}" for j in range(d)]
            if header[:-1] != expected:
                raise ValueError(f"{path}: feature columns must be x0..x{d - 1}")
            feats: list[list[float]] = []
            labs: list[float] = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != d + 1:
                    raise ValueError(f"{path}: row {lineno}: expected {d + 1} cells, got {len(row)}")
                try:
                    feats.append([float(v) for v in row[:-1]])
                except ValueError as exc:
                    raise ValueError(f"{path}: row {lineno}: bad feature value ({exc})") from None
                cell = row[-1].strip()
                if cell == "":
                    labs.append(float("nan"))
                else:
                    try:
                        labs.append(float(cell))
                    except ValueError:
                        raise ValueError(f"{path}: row {lineno}: bad label {cell!r}") from None
        return cls(np.asarray(feats, dtype=float), np.asarray(labs, dtype=float), schema)
