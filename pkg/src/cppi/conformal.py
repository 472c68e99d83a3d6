"""Set-predictors: split conformal calibration, a differentially private
backend, an online (streaming) backend, and miscoverage accounting.

A :class:`CalibratedPredictor` bundles a conformity score, a threshold and a
declared miscoverage rate. Downstream inference consumes the declared rate,
never the empirical one: split calibration declares its target, the private
backend declares the target plus an analytic inflation, and the online
backend declares its tracking target.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .datamodel import (
    Dataset,
    FiniteSet,
    Interval,
    LabelSchema,
    PredictionSet,
    SchemaError,
)

__all__ = [
    "ConformityScore",
    "CalibratedPredictor",
    "OnlineCalibratorState",
    "negative_probability_score",
    "absolute_residual_score",
    "split_threshold",
    "split_calibrate",
    "dp_threshold_rank",
    "dp_rank_inflation",
    "dp_calibrate",
    "online_update",
    "predict_set",
    "predict_sets",
    "classification_membership",
    "interval_set_arrays",
    "empirical_err",
    "calibration_report",
]


@dataclass(frozen=True)
class ConformityScore:
    """A conformity score built on a user-supplied point predictor.

    ``model`` is batch-oriented: for classification it maps an (n, d) feature
    matrix to an (n, k) matrix of per-label probabilities aligned with the
    schema alphabet; for regression it maps features to an (n,) vector of
    point predictions.
    """

    name: str
    kind: str  # "classification" | "regression"
    model: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self) -> None:
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown score kind: {self.kind!r}")

    def scores(self, features: np.ndarray, labels: np.ndarray,
               schema: LabelSchema) -> np.ndarray:
        """Per-row conformity scores s(x_i, y_i)."""
        features = np.asarray(features, dtype=float)
        labels = np.asarray(labels, dtype=float)
        if self.kind == "classification":
            probs = np.asarray(self.model(features), dtype=float)
            idx = np.searchsorted(np.asarray(schema.alphabet), labels.astype(int))
            return -probs[np.arange(len(labels)), idx]
        centers = np.asarray(self.model(features), dtype=float)
        return np.abs(centers - labels)

    def label_scores(self, features: np.ndarray) -> np.ndarray:
        """Classification only: (n, k) score of every alphabet label per row."""
        if self.kind != "classification":
            raise ValueError("label_scores is only defined for classification scores")
        return -np.asarray(self.model(np.asarray(features, dtype=float)), dtype=float)

    def centers(self, features: np.ndarray) -> np.ndarray:
        """Regression only: per-row point predictions."""
        if self.kind != "regression":
            raise ValueError("centers is only defined for regression scores")
        return np.asarray(self.model(np.asarray(features, dtype=float)), dtype=float)


def negative_probability_score(prob_model: Callable[[np.ndarray], np.ndarray],
                               name: str = "neg_prob") -> ConformityScore:
    """Classification score s(x, y) = -p(y | x)."""
    return ConformityScore(name=name, kind="classification", model=prob_model)


def absolute_residual_score(point_model: Callable[[np.ndarray], np.ndarray],
                            name: str = "abs_residual") -> ConformityScore:
    """Regression score s(x, y) = |f(x) - y|."""
    return ConformityScore(name=name, kind="regression", model=point_model)


@dataclass(frozen=True)
class CalibratedPredictor:
    """A conformity score plus threshold with a declared miscoverage rate."""

    score: ConformityScore
    threshold: float
    err: float
    backend: str  # "split" | "dp" | "online"
    schema: LabelSchema
    n_calib: int | None = None
    privacy_epsilon: float | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.err <= 1.0):
            raise ValueError("declared miscoverage must lie in [0, 1]")
        if math.isnan(self.threshold) or self.threshold == -math.inf:
            raise ValueError("threshold must be finite or +inf")
        if self.backend not in ("split", "dp", "online"):
            raise ValueError(f"unknown backend: {self.backend!r}")


def split_threshold(scores, target_err: float) -> float:
    """Threshold rule: the ceil((1 - err) * (n + 1))-th smallest of the
    calibration scores augmented with +inf.

    Returns +inf (with a warning) when the target forces the augmented top
    order statistic; the resulting full sets are conservative but valid.
    """
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("empty calibration scores")
    if not (0.0 < target_err < 1.0):
        raise ValueError(f"target_err must lie in (0, 1), got {target_err}")
    n = s.size
    k = math.ceil((1.0 - target_err) * (n + 1))
    if k > n:
        warnings.warn(
            f"target_err={target_err} is below 1/(n+1)={1.0 / (n + 1):.3g}: "
            "threshold is +inf and every prediction set is the full label space",
            RuntimeWarning, stacklevel=2,
        )
        return math.inf
    return float(np.partition(s, k - 1)[k - 1])


def split_calibrate(score: ConformityScore, calib: Dataset,
                    target_err: float) -> CalibratedPredictor:
    """Split conformal calibration on the labelled view of ``calib``."""
    if calib.n_labelled == 0:
        raise ValueError("empty calibration set (no labelled rows)")
    s = score.scores(calib.labelled_features, calib.labelled_labels, calib.schema)
    t = split_threshold(s, target_err)
    return CalibratedPredictor(score=score, threshold=t, err=target_err,
                               backend="split", schema=calib.schema,
                               n_calib=int(s.size))


def dp_rank_inflation(n: int, epsilon: float, confidence: float = 0.95) -> float:
    """Quantile-level shift covering the private mechanism's rank error.

    Solves the mechanism tail bound P[|rank error| > k] <= (n+1) exp(-eps k/2)
    at the given confidence and converts the rank shift to a quantile level.
    """
    k = math.ceil((2.0 / epsilon) * math.log((n + 1) / (1.0 - confidence)))
    return min(1.0, k / (n + 1))


def dp_threshold_rank(n: int, target_rank: int, epsilon: float,
                      rng: np.random.Generator) -> int:
    """Sample a 1-based rank via the exponential mechanism.

    Utility is the negative rank distance to ``target_rank``; sensitivity of
    the rank statistic is 1, so weights are exp(-eps |r - target| / 2).
    """
    ranks = np.arange(1, n + 1)
    log_w = -np.abs(ranks - target_rank) * (epsilon / 2.0)
    log_w -= log_w.max()
    w = np.exp(log_w)
    w /= w.sum()
    return int(rng.choice(ranks, p=w))


def dp_calibrate(score: ConformityScore, calib: Dataset, target_err: float,
                 privacy_epsilon: float,
                 rng: np.random.Generator | None = None) -> CalibratedPredictor:
    """Epsilon-differentially-private calibration via the exponential
    mechanism over score ranks.

    The declared miscoverage is the target plus an analytic inflation that
    covers the mechanism's rank error at confidence 0.95, keeping downstream
    consumers of the declared rate conservative.
    """
    if privacy_epsilon <= 0.0:
        raise ValueError("privacy_epsilon must be positive")
    if calib.n_labelled == 0:
        raise ValueError("empty calibration set (no labelled rows)")
    if rng is None:
        rng = np.random.default_rng()
    s = np.sort(score.scores(calib.labelled_features, calib.labelled_labels, calib.schema))
    n = s.size
    target_rank = min(math.ceil((1.0 - target_err) * (n + 1)), n)
    rank = dp_threshold_rank(n, target_rank, privacy_epsilon, rng)
    inflation = dp_rank_inflation(n, privacy_epsilon)
    declared = min(1.0, target_err + inflation)
    return CalibratedPredictor(score=score, threshold=float(s[rank - 1]), err=declared,
                               backend="dp", schema=calib.schema, n_calib=int(n),
                               privacy_epsilon=privacy_epsilon)


@dataclass(frozen=True)
class OnlineCalibratorState:
    """Threshold tracker for streaming calibration.

    The update is a step on the miscoverage indicator: on each observed
    outcome the threshold moves by ``lr * (1[not covered] - target)``, so the
    long-run miss rate converges to the target on any stream.
    """

    threshold: float
    step_size: float
    target: float
    step: int = 0
    decay: bool = False

    def __post_init__(self) -> None:
        if self.step_size <= 0.0:
            raise ValueError("step size must be positive")
        if not (0.0 < self.target < 1.0):
            raise ValueError("target miscoverage must lie in (0, 1)")

    def learning_rate(self) -> float:
        if self.decay:
            return self.step_size / math.sqrt(self.step + 1)
        return self.step_size


def online_update(state: OnlineCalibratorState, covered: bool) -> OnlineCalibratorState:
    """One tracking step; returns the new state (states are immutable)."""
    lr = state.learning_rate()
    miss = 0.0 if covered else 1.0
    return replace(state, threshold=state.threshold + lr * (miss - state.target),
                   step=state.step + 1)


def predict_set(pred: CalibratedPredictor, x: np.ndarray) -> PredictionSet:
    """Prediction set at one feature vector.

    Classification keeps every alphabet label whose score is below the
    threshold; regression returns the residual band around the point
    prediction, intersected with the declared label range. Empty sets are
    widened to the full label space, which keeps images well-defined and is
    conservative for every downstream guarantee.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise SchemaError(f"feature vector must be 1-dimensional, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise SchemaError("feature vector must be finite")
    sets = predict_sets(pred, x[None, :])
    return sets[0]


def classification_membership(pred: CalibratedPredictor,
                              features: np.ndarray) -> np.ndarray:
    """(n, k) membership matrix over the alphabet, widened where empty."""
    label_scores = pred.score.label_scores(features)
    member = label_scores <= pred.threshold
    empty = ~member.any(axis=1)
    member[empty] = True
    return member


def interval_set_arrays(pred: CalibratedPredictor,
                        features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row interval endpoints for a regression predictor, post widening."""
    schema = pred.schema
    n = np.asarray(features).shape[0]
    if not math.isfinite(pred.threshold):
        lo = np.full(n, schema.lo)
        hi = np.full(n, schema.hi)
        return lo, hi
    centers = pred.score.centers(features)
    lo = centers - pred.threshold
    hi = centers + pred.threshold
    if pred.threshold < 0.0:
        lo = np.full(n, schema.lo)
        hi = np.full(n, schema.hi)
        return lo, hi
    return np.clip(lo, schema.lo, schema.hi), np.clip(hi, schema.lo, schema.hi)


def predict_sets(pred: CalibratedPredictor, features: np.ndarray) -> list[PredictionSet]:
    """Prediction sets for a batch of feature vectors."""
    features = np.asarray(features, dtype=float)
    if pred.score.kind == "classification":
        alphabet = np.asarray(pred.schema.alphabet)
        member = classification_membership(pred, features)
        return [FiniteSet(tuple(int(a) for a in alphabet[row])) for row in member]
    lo, hi = interval_set_arrays(pred, features)
    return [Interval(float(a), float(b)) for a, b in zip(lo, hi)]


def empirical_err(pred: CalibratedPredictor, holdout: Dataset) -> float:
    """Fraction of labelled holdout rows whose label escapes its set."""
    if holdout.n_labelled == 0:
        raise ValueError("empty holdout (no labelled rows)")
    x = holdout.labelled_features
    y = holdout.labelled_labels
    sets = predict_sets(pred, x)
    misses = sum(0 if s.contains(v) else 1 for s, v in zip(sets, y))
    return misses / len(sets)


def calibration_report(pred: CalibratedPredictor) -> dict:
    """Calibration summary in the wire format used by the CLI."""
    report = {
        "backend": pred.backend,
        "threshold": pred.threshold,
        "declared_err": pred.err,
        "n_calib": pred.n_calib,
    }
    if pred.privacy_epsilon is not None:
        report["privacy_epsilon"] = pred.privacy_epsilon
    return report
