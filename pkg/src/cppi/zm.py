"""Confidence sets for Z- and M-estimands via grid inversion.

A Z-estimand solves ``E[psi(Y; theta*)] = 0``. For each grid theta the
per-row infima and suprema of ``psi(.; theta)`` over the prediction sets give
one-sided mean bounds at level 1 - alpha/2, and theta is accepted when the
interval ``[lower - M_theta * err, upper + M_theta * err]`` straddles zero.
M-estimation reduces to the same inversion applied to the loss derivative.

The grid sweep has three engines selected automatically: an O(n + grid) path
for estimating functions that are an affine shift in theta (means, squared
loss), a counting path for the quantile indicator over interval sets, and a
generic per-theta loop. All three produce the same acceptance rule; the
``engine`` argument can force the generic loop for cross-checks.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bounds import hoeffding_margin, normal_inverse_cdf
from .conformal import CalibratedPredictor, classification_membership, interval_set_arrays
from .datamodel import BoundedFunctional, Dataset, interval_image_arrays
from .mean import image_arrays, _one_sided

__all__ = [
    "EstimatingFunction",
    "ThetaGrid",
    "ZConfidenceSet",
    "quantile_psi",
    "mean_psi",
    "squared_loss_derivative",
    "pinball_loss_derivative",
    "z_confidence_set",
    "m_confidence_set",
    "z_accepts_theta",
    "encode_mask",
    "decode_mask",
]


@dataclass(frozen=True)
class EstimatingFunction:
    """An estimating function psi(y; theta) with per-theta range bounds.

    ``psi`` must broadcast over numpy arrays in both arguments. ``bounds``
    maps theta to the declared range (a_theta, b_theta) of psi(Y; theta).
    ``shape``/``jump`` describe psi(.; theta) as a function of y at fixed
    theta, with the same meaning as on :class:`BoundedFunctional`.

    ``base``/``slope`` mark the affine fast path ``psi(y; theta) =
    base(y) + slope * theta``; ``quantile_q`` marks the indicator form
    ``psi(y; theta) = 1[y <= theta] - q``.
    """

    name: str
    psi: Callable
    bounds: Callable[[float], tuple[float, float]]
    shape: str = "generic"
    jump: Callable[[float], float] | None = None
    base: BoundedFunctional | None = None
    slope: float = 0.0
    quantile_q: float | None = None

    def span(self, theta: float) -> float:
        a, b = self.bounds(theta)
        return b - a

    def at_theta(self, theta: float) -> BoundedFunctional:
        """psi(.; theta) packaged as a bounded functional of the label."""
        a, b = self.bounds(theta)
        return BoundedFunctional(
            name=f"{self.name}@{theta}",
            fn=lambda y, _t=theta: self.psi(np.asarray(y, dtype=float), _t),
            lower=a, upper=b, shape=self.shape,
            jump=None if self.jump is None else self.jump(theta),
        )


def quantile_psi(q: float) -> EstimatingFunction:
    """psi(y; theta) = 1[y <= theta] - q, the q-quantile estimating function."""
    if not (0.0 < q < 1.0):
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return EstimatingFunction(
        name=f"quantile({q})",
        psi=lambda y, th: (np.asarray(y, dtype=float) <= th).astype(float) - q,
        bounds=lambda th: (-q, 1.0 - q),
        shape="step",
        jump=lambda th: th,
        quantile_q=q,
    )


def mean_psi(phi: BoundedFunctional) -> EstimatingFunction:
    """psi(y; theta) = phi(y) - theta, the mean estimating function."""
    return EstimatingFunction(
        name=f"mean[{phi.name}]",
        psi=lambda y, th: np.asarray(phi.fn(np.asarray(y, dtype=float)), dtype=float) - th,
        bounds=lambda th: (phi.lower - th, phi.upper - th),
        shape=phi.shape,
        jump=None if phi.jump is None else (lambda th: phi.jump),
        base=phi,
        slope=-1.0,
    )


def squared_loss_derivative(phi: BoundedFunctional) -> EstimatingFunction:
    """d/dtheta of the squared loss (phi(y) - theta)^2 / 2, i.e. theta - phi(y)."""
    negated = BoundedFunctional(
        name=f"neg[{phi.name}]",
        fn=lambda y: -np.asarray(phi.fn(np.asarray(y, dtype=float)), dtype=float),
        lower=-phi.upper, upper=-phi.lower, shape=phi.shape, jump=phi.jump,
        grid_resolution=phi.grid_resolution,
    )
    return EstimatingFunction(
        name=f"squared_loss_dtheta[{phi.name}]",
        psi=lambda y, th: th - np.asarray(phi.fn(np.asarray(y, dtype=float)), dtype=float),
        bounds=lambda th: (th - phi.upper, th - phi.lower),
        shape=phi.shape,
        jump=None if phi.jump is None else (lambda th: phi.jump),
        base=negated,
        slope=1.0,
    )


def pinball_loss_derivative(q: float) -> EstimatingFunction:
    """a.e. derivative of the pinball loss at level q: q - 1[y <= theta]."""
    if not (0.0 < q < 1.0):
        raise ValueError(f"q must lie in (0, 1), got {q}")
    return EstimatingFunction(
        name=f"pinball_dtheta({q})",
        psi=lambda y, th: q - (np.asarray(y, dtype=float) <= th).astype(float),
        bounds=lambda th: (q - 1.0, q),
        shape="step",
        jump=lambda th: th,
    )


@dataclass(frozen=True)
class ThetaGrid:
    """A uniform grid over the parameter interval [lo, hi]."""

    lo: float
    hi: float
    count: int = 2001

    def __post_init__(self) -> None:
        if not (self.lo < self.hi):
            raise ValueError("grid needs lo < hi")
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.count)

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / (self.count - 1)


@dataclass(frozen=True)
class ZConfidenceSet:
    """Grid acceptance mask with per-theta diagnostics.

    The hull is the smallest interval containing every accepted point; an
    empty acceptance is reported explicitly (hull None), never collapsed.
    """

    grid: ThetaGrid
    mask: np.ndarray
    lower: np.ndarray   # per-theta lower mean bound
    upper: np.ndarray   # per-theta upper mean bound
    spans: np.ndarray   # per-theta range width of psi
    alpha: float
    method: str

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    @property
    def accepted_points(self) -> np.ndarray:
        return self.grid.points[self.mask]

    @property
    def hull(self) -> tuple[float, float] | None:
        if self.is_empty:
            return None
        pts = self.accepted_points
        return (float(pts[0]), float(pts[-1]))

    def contains(self, theta: float) -> bool:
        h = self.hull
        return h is not None and h[0] <= theta <= h[1]

    def to_record(self) -> dict:
        return {
            "grid": {"lo": self.grid.lo, "hi": self.grid.hi, "n": self.grid.count},
            "accepted_mask": encode_mask(self.mask),
            "hull": None if self.hull is None else [self.hull[0], self.hull[1]],
            "alpha": self.alpha,
            "method": self.method,
        }


def encode_mask(mask: np.ndarray) -> list[list[int]]:
    """Run-length encode a boolean mask as [value, count] pairs."""
    runs: list[list[int]] = []
    for v in np.asarray(mask, dtype=bool):
        b = int(v)
        if runs and runs[-1][0] == b:
            runs[-1][1] += 1
        else:
            runs.append([b, 1])
    return runs


def decode_mask(runs: list[list[int]]) -> np.ndarray:
    """Inverse of :func:`encode_mask`."""
    parts = [np.full(count, bool(value)) for value, count in runs]
    if not parts:
        return np.zeros(0, dtype=bool)
    return np.concatenate(parts)


def _features_of(data) -> np.ndarray:
    if isinstance(data, Dataset):
        return data.unlabelled_features
    return np.asarray(data, dtype=float)


def _margins(values: np.ndarray, alpha: float, method: str,
             range_lo, range_hi, z: float) -> np.ndarray:
    """Per-column one-sided margins matching the scalar bound constructors."""
    n = values.shape[0]
    if method == "hoeffding":
        width = np.asarray(range_hi, dtype=float) - np.asarray(range_lo, dtype=float)
        return width * math.sqrt(math.log(1.0 / alpha) / (2.0 * n))
    if method == "clt":
        sd = np.std(values, axis=0, ddof=1)
        return z * sd / math.sqrt(n)
    raise ValueError(f"unknown CI method: {method!r}")


def _curves_affine(psi, pred, features, thetas, alpha, method):
    infs, sups = image_arrays(psi.base, pred, features)
    lower0 = _one_sided(infs, "lower", alpha / 2.0, method, psi.base.lower, psi.base.upper)
    upper0 = _one_sided(sups, "upper", alpha / 2.0, method, psi.base.lower, psi.base.upper)
    shift = psi.slope * thetas
    spans = np.full(thetas.shape, psi.base.span)
    return lower0 + shift, upper0 + shift, spans


def _indicator_margin(counts: np.ndarray, n: int, alpha: float, method: str,
                      z: float) -> np.ndarray:
    if method == "hoeffding":
        return np.full(counts.shape, hoeffding_margin(1.0, alpha, n))
    sd = np.sqrt(counts * (n - counts) / (n * (n - 1.0)))
    return z * sd / math.sqrt(n)


def _curves_quantile(psi, pred, features, thetas, alpha, method):
    q = psi.quantile_q
    los, his = interval_set_arrays(pred, features)
    n = los.shape[0]
    z = normal_inverse_cdf(1.0 - alpha / 2.0) if method == "clt" else 0.0
    # inf over an interval set is the indicator at the upper endpoint,
    # sup the indicator at the lower endpoint.
    k_inf = np.searchsorted(np.sort(his), thetas, side="right").astype(float)
    k_sup = np.searchsorted(np.sort(los), thetas, side="right").astype(float)
    mean_inf = k_inf / n - q
    mean_sup = k_sup / n - q
    lower = mean_inf - _indicator_margin(k_inf, n, alpha / 2.0, method, z)
    upper = mean_sup + _indicator_margin(k_sup, n, alpha / 2.0, method, z)
    spans = np.ones(thetas.shape)
    return lower, upper, spans


def _theta_images(psi, theta, member, values_fn, los, his):
    """Per-row (inf, sup) of psi(.; theta) for one theta."""
    if member is not None:
        vals = values_fn(theta)
        infs = np.where(member, vals[None, :], np.inf).min(axis=1)
        sups = np.where(member, vals[None, :], -np.inf).max(axis=1)
        return infs, sups
    return interval_image_arrays(psi.at_theta(theta), los, his)


def _curves_generic(psi, pred, features, thetas, alpha, method):
    if pred.score.kind == "classification":
        member = classification_membership(pred, features)
        alphabet = np.asarray(pred.schema.alphabet, dtype=float)
        values_fn = lambda th: np.asarray(psi.psi(alphabet, th), dtype=float)
        los = his = None
    else:
        member = None
        values_fn = None
        los, his = interval_set_arrays(pred, features)
    z = normal_inverse_cdf(1.0 - alpha / 2.0) if method == "clt" else 0.0
    lower = np.empty(thetas.shape)
    upper = np.empty(thetas.shape)
    spans = np.empty(thetas.shape)
    for j, th in enumerate(thetas):
        a, b = psi.bounds(float(th))
        spans[j] = b - a
        infs, sups = _theta_images(psi, float(th), member, values_fn, los, his)
        m_inf = _margins(infs, alpha / 2.0, method, a, b, z)
        m_sup = _margins(sups, alpha / 2.0, method, a, b, z)
        lower[j] = np.mean(infs) - m_inf
        upper[j] = np.mean(sups) + m_sup
    return lower, upper, spans


def z_confidence_set(psi: EstimatingFunction, grid: ThetaGrid,
                     pred: CalibratedPredictor, unlabelled, alpha: float,
                     method: str = "clt", engine: str = "auto") -> ZConfidenceSet:
    """Grid inversion for the Z-estimand of ``psi``.

    A grid theta is accepted when
    ``lower_theta - M_theta * err <= 0 <= upper_theta + M_theta * err``.
    An all-rejected sweep returns an empty set with a warning rather than
    raising: an empty confidence set is a reportable outcome.
    """
    features = _features_of(unlabelled)
    if features.shape[0] == 0:
        raise ValueError("no unlabelled rows to infer from")
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    thetas = grid.points
    if engine not in ("auto", "generic"):
        raise ValueError(f"unknown engine: {engine!r}")
    if engine == "auto" and psi.base is not None:
        lower, upper, spans = _curves_affine(psi, pred, features, thetas, alpha, method)
    elif (engine == "auto" and psi.quantile_q is not None
          and pred.score.kind == "regression"):
        lower, upper, spans = _curves_quantile(psi, pred, features, thetas, alpha, method)
    else:
        lower, upper, spans = _curves_generic(psi, pred, features, thetas, alpha, method)
    penalty = spans * pred.err
    mask = (lower - penalty <= 0.0) & (0.0 <= upper + penalty)
    result = ZConfidenceSet(grid=grid, mask=mask, lower=lower, upper=upper,
                            spans=spans, alpha=alpha, method=method)
    if result.is_empty:
        warnings.warn("every grid point was rejected: empty confidence set",
                      RuntimeWarning, stacklevel=2)
    return result


def m_confidence_set(loss_derivative: EstimatingFunction, grid: ThetaGrid,
                     pred: CalibratedPredictor, unlabelled, alpha: float,
                     method: str = "clt", engine: str = "auto") -> ZConfidenceSet:
    """M-estimation confidence set: the Z inversion of the loss derivative."""
    return z_confidence_set(loss_derivative, grid, pred, unlabelled, alpha,
                            method, engine)


def z_accepts_theta(psi: EstimatingFunction, theta: float,
                    pred: CalibratedPredictor, unlabelled, alpha: float,
                    method: str = "clt") -> bool:
    """The acceptance test of ``z_confidence_set`` at a single theta.

    Useful for checking an off-grid parameter value directly.
    """
    features = _features_of(unlabelled)
    phi_t = psi.at_theta(float(theta))
    if pred.score.kind == "classification":
        member = classification_membership(pred, features)
        alphabet = np.asarray(pred.schema.alphabet, dtype=float)
        vals = np.asarray(psi.psi(alphabet, float(theta)), dtype=float)
        infs = np.where(member, vals[None, :], np.inf).min(axis=1)
        sups = np.where(member, vals[None, :], -np.inf).max(axis=1)
    else:
        los, his = interval_set_arrays(pred, features)
        infs, sups = interval_image_arrays(phi_t, los, his)
    lower = _one_sided(infs, "lower", alpha / 2.0, method, phi_t.lower, phi_t.upper)
    upper = _one_sided(sups, "upper", alpha / 2.0, method, phi_t.lower, phi_t.upper)
    penalty = phi_t.span * pred.err
    return (lower - penalty <= 0.0) and (0.0 <= upper + penalty)
