"""Synthetic generators and brute-force harnesses for Monte Carlo studies.

Everything here is a pure function of (seed, config): re-running a generator
or a study with the same inputs produces identical results, and trials derive
per-trial seeds so they are order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bounds import normal_cdf
from .conformal import (
    CalibratedPredictor,
    absolute_residual_score,
    dp_calibrate,
    negative_probability_score,
)
from .datamodel import Dataset, LabelSchema, identity_functional, BoundedFunctional
from .mean import multivariate_mean_ci, ppi_mean_ci
from .zm import ThetaGrid, m_confidence_set, mean_psi, quantile_psi, squared_loss_derivative, z_confidence_set

__all__ = [
    "FiniteJoint",
    "gen_finite_joint",
    "StreamConfig",
    "StreamStep",
    "swap_probability",
    "gen_poisoned_stream",
    "synthetic_classification_predictor",
    "gen_classification_rows",
    "synthetic_regression_predictor",
    "gen_regression_rows",
    "coverage_study",
]


@dataclass(frozen=True)
class FiniteJoint:
    """An explicit finite joint distribution over (x id, label)."""

    atoms: tuple[tuple[int, int, float], ...]

    def __post_init__(self) -> None:
        if len(self.atoms) > 10_000:
            raise ValueError(f"joint support too large: {len(self.atoms)} atoms")
        total = 0.0
        for _, _, p in self.atoms:
            if p < 0.0:
                raise ValueError("atom probabilities must be non-negative")
            total += p
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"atom probabilities sum to {total}, not 1")

    def marginal_x(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for x, _, p in self.atoms:
            out[x] = out.get(x, 0.0) + p
        return out

    def marginal_y(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for _, y, p in self.atoms:
            out[y] = out.get(y, 0.0) + p
        return out

    def expectation(self, fn: Callable[[int, int], float]) -> float:
        return sum(p * fn(x, y) for x, y, p in self.atoms)


def gen_finite_joint(seed: int, x_support: int = 20, y_support: int = 5) -> FiniteJoint:
    """Random joint with rational probabilities; deterministic per seed."""
    if x_support > 20 or y_support > 5:
        raise ValueError("support too large: x_support <= 20 and y_support <= 5")
    rng = np.random.default_rng(seed)
    weights = rng.integers(1, 100, size=(x_support, y_support))
    total = float(weights.sum())
    atoms = tuple(
        (int(x), int(y), float(weights[x, y]) / total)
        for x in range(x_support) for y in range(y_support)
    )
    return FiniteJoint(atoms=atoms)


@dataclass(frozen=True)
class StreamConfig:
    """Settings for the deployed-model monitoring stream.

    Each step carries a predicted miss probability (the residual model's
    output) and a true miss indicator revealed with ``label_probability``.
    Under poisoning, a step past the change point is swapped for a hard
    sample with probability ``((t + 1)/5 + 0.1)^exponent`` at progress t.
    """

    horizon: int
    change_point: float = 0.2
    schedule_exponent: float = 2.0
    label_probability: float = 0.05
    poisoned: bool = True
    seed: int = 0
    base_risk: tuple[float, float] = (0.0, 0.2)
    poison_risk: tuple[float, float] = (0.96, 0.995)

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for frac in (self.change_point, self.label_probability):
            if not (0.0 <= frac <= 1.0):
                raise ValueError("fractions must lie in [0, 1]")


@dataclass(frozen=True)
class StreamStep:
    x: tuple[float, ...]   # (predicted miss probability,)
    miss: int | None       # revealed miss indicator, None when unlabelled
    poisoned: bool
    truth: int             # actual miss indicator (generator-side diagnostic)


def swap_probability(progress: float, change_point: float = 0.2,
                     exponent: float = 2.0) -> float:
    """Poisoning probability at stream progress t in [0, 1]."""
    if progress < change_point:
        return 0.0
    return ((progress + 1.0) / 5.0 + 0.1) ** exponent


def gen_poisoned_stream(cfg: StreamConfig) -> list[StreamStep]:
    """The monitoring stream; with ``poisoned=False`` it is exchangeable."""
    rng = np.random.default_rng(cfg.seed)
    n = cfg.horizon
    progress = np.zeros(n) if n == 1 else np.arange(n) / (n - 1)
    swap_p = np.array([
        swap_probability(t, cfg.change_point, cfg.schedule_exponent) if cfg.poisoned else 0.0
        for t in progress
    ])
    swapped = rng.random(n) < swap_p
    rho = np.where(
        swapped,
        rng.uniform(cfg.poison_risk[0], cfg.poison_risk[1], size=n),
        rng.uniform(cfg.base_risk[0], cfg.base_risk[1], size=n),
    )
    truth = (rng.random(n) < rho).astype(int)
    revealed = rng.random(n) < cfg.label_probability
    return [
        StreamStep(
            x=(float(rho[i]),),
            miss=int(truth[i]) if revealed[i] else None,
            poisoned=bool(swapped[i]),
            truth=int(truth[i]),
        )
        for i in range(n)
    ]


def synthetic_classification_predictor(n_labels: int, err: float) -> CalibratedPredictor:
    """Set-predictor with an exactly known miscoverage rate.

    Expects features [u, g]: rows with u below the singleton rate get the
    singleton {g}, other rows the full alphabet. Generate matching rows with
    :func:`gen_classification_rows`; the declared err is exact by design.
    """
    schema = LabelSchema(kind="categorical", alphabet=tuple(range(n_labels)))

    def prob_model(features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        n = features.shape[0]
        probs = np.full((n, n_labels), 1.0 / n_labels)
        singleton = features[:, 0] < features[:, 2]
        guess = features[singleton, 1].astype(int)
        probs[singleton] = 0.0
        probs[np.flatnonzero(singleton), guess] = 1.0
        return probs

    return CalibratedPredictor(
        score=negative_probability_score(prob_model),
        threshold=-0.4, err=err, backend="split", schema=schema,
    )


def gen_classification_rows(rng: np.random.Generator, n: int, label_probs,
                            singleton_rate: float,
                            miss_given_singleton: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows (features, labels) matched to the synthetic classification
    predictor; its exact miscoverage is singleton_rate * miss_given_singleton.
    """
    label_probs = np.asarray(label_probs, dtype=float)
    k = label_probs.size
    y = rng.choice(k, size=n, p=label_probs)
    u = rng.random(n)
    guess = y.copy()
    wrong = rng.random(n) < miss_given_singleton
    shift = rng.integers(1, k, size=n)
    guess[wrong] = (y[wrong] + shift[wrong]) % k
    features = np.column_stack([u, guess.astype(float), np.full(n, singleton_rate)])
    return features, y.astype(float)


def synthetic_regression_predictor(band: float, noise_sd: float,
                                   schema: LabelSchema) -> CalibratedPredictor:
    """Interval predictor f(x) +- band with exact declared miscoverage.

    Expects the point prediction as the first feature; the label is the
    prediction plus centered Gaussian noise of sd ``noise_sd``, so the exact
    miss rate is 2 * Phi(-band / noise_sd).
    """
    err = 2.0 * normal_cdf(-band / noise_sd)
    return CalibratedPredictor(
        score=absolute_residual_score(lambda X: np.asarray(X, dtype=float)[:, 0]),
        threshold=band, err=err, backend="split", schema=schema,
    )


def gen_regression_rows(rng: np.random.Generator, n: int, center_sd: float,
                        noise_sd: float) -> tuple[np.ndarray, np.ndarray]:
    """Rows for the regression predictor: y = f + noise, f ~ N(0, center_sd)."""
    f = rng.normal(0.0, center_sd, size=n)
    y = f + rng.normal(0.0, noise_sd, size=n)
    return f[:, None], y


def _bernoulli_mean_trial(task: dict, method: dict, alpha: float):
    p = task["p"]
    n = task["n"]
    target_err = task["target_err"]
    singleton_rate = task["singleton_rate"]
    miss_given_singleton = target_err / singleton_rate
    pred = synthetic_classification_predictor(2, target_err)
    phi = identity_functional(0.0, 1.0)
    ci_method = method.get("method", "clt")

    def trial(rng: np.random.Generator) -> tuple[bool, float]:
        features, _ = gen_classification_rows(rng, n, [1.0 - p, p], singleton_rate,
                                              miss_given_singleton)
        result = ppi_mean_ci(phi, pred, features, alpha, ci_method)
        lo, hi = result.interval
        return result.contains(p), hi - lo

    return trial


def _discrete_mean_2d_trial(task: dict, method: dict, alpha: float):
    probs = np.asarray(task["probs"], dtype=float)
    k = probs.size
    n = task["n"]
    target_err = task["target_err"]
    singleton_rate = task["singleton_rate"]
    miss_given_singleton = target_err / singleton_rate
    pred = synthetic_classification_predictor(k, target_err)
    phi1 = identity_functional(0.0, float(k - 1))
    top = float(k - 1)
    phi2 = BoundedFunctional(
        "is_top", lambda y: (np.asarray(y, dtype=float) == top).astype(float),
        0.0, 1.0, shape="step", jump=top - 0.5,
    )
    truth = np.array([float(np.dot(np.arange(k), probs)), float(probs[-1])])
    ci_method = method.get("method", "clt")

    def trial(rng: np.random.Generator) -> tuple[bool, float]:
        features, _ = gen_classification_rows(rng, n, probs, singleton_rate,
                                              miss_given_singleton)
        box = multivariate_mean_ci([phi1, phi2], pred, features, alpha, ci_method)
        widths = [hi - lo for lo, hi in box.box]
        return box.contains(truth), float(np.mean(widths))

    return trial


def _gaussian_zset_trial(task: dict, method: dict, alpha: float):
    n = task["n"]
    center_sd = task["center_sd"]
    noise_sd = task["noise_sd"]
    band = task["band"]
    total_sd = math.hypot(center_sd, noise_sd)
    schema = LabelSchema(kind="real", lo=-8.0 * total_sd, hi=8.0 * total_sd)
    pred = synthetic_regression_predictor(band, noise_sd, schema)
    grid = ThetaGrid(*task.get("grid", (-3.0 * total_sd, 3.0 * total_sd, 2001)))
    ci_method = method.get("method", "clt")
    kind = method["kind"]
    if kind == "z_quantile":
        q = task["q"]
        psi = quantile_psi(q)
        from .bounds import normal_inverse_cdf
        theta_star = total_sd * normal_inverse_cdf(q)
        runner = z_confidence_set
    elif kind == "m_squared_loss":
        clip = task["clip"]
        phi = BoundedFunctional(
            f"clip({clip})",
            lambda y, _c=clip: np.clip(np.asarray(y, dtype=float), -_c, _c),
            -clip, clip, shape="monotone",
        )
        psi = squared_loss_derivative(phi)
        theta_star = 0.0
        runner = m_confidence_set
    else:
        raise ValueError(f"unknown z/m method kind: {kind!r}")

    def trial(rng: np.random.Generator) -> tuple[bool, float]:
        features, _ = gen_regression_rows(rng, n, center_sd, noise_sd)
        result = runner(psi, grid, pred, features, alpha, ci_method)
        hull = result.hull
        width = 0.0 if hull is None else hull[1] - hull[0]
        return result.contains(theta_star), width

    return trial


def _dp_bernoulli_mean_trial(task: dict, method: dict, alpha: float):
    n = task["n"]
    n_calib = task["n_calib"]
    target_err = task["target_err"]
    epsilon = task["epsilon"]
    schema = LabelSchema(kind="categorical", alphabet=(0, 1))
    phi = identity_functional(0.0, 1.0)
    ci_method = method.get("method", "clt")
    score = negative_probability_score(
        lambda X: np.column_stack([1.0 - np.asarray(X)[:, 0], np.asarray(X)[:, 0]])
    )

    def gen(rng: np.random.Generator, rows: int):
        p1 = rng.uniform(0.1, 0.9, size=rows)
        y = (rng.random(rows) < p1).astype(float)
        return p1[:, None], y

    def trial(rng: np.random.Generator) -> tuple[bool, float]:
        xc, yc = gen(rng, n_calib)
        calib = Dataset(xc, yc, schema)
        pred = dp_calibrate(score, calib, target_err, epsilon, rng)
        features, _ = gen(rng, n)
        result = ppi_mean_ci(phi, pred, features, alpha, ci_method)
        lo, hi = result.interval
        return result.contains(0.5), hi - lo

    return trial


_TASKS: dict[str, Callable] = {
    "bernoulli_mean": _bernoulli_mean_trial,
    "discrete_mean_2d": _discrete_mean_2d_trial,
    "gaussian_zset": _gaussian_zset_trial,
    "dp_bernoulli_mean": _dp_bernoulli_mean_trial,
}


def coverage_study(task_spec: dict, method_spec: dict, trials: int,
                   alpha: float, seed: int) -> dict:
    """Monte Carlo coverage of an inference method on a synthetic task.

    Repeats (generate data, run inference, check that the known truth lies in
    the output) and reports the rate together with the binomial Monte Carlo
    sigma at the nominal level. All inputs are echoed for reproducibility.
    """
    if trials < 100:
        raise ValueError("need at least 100 trials for a meaningful rate")
    kind = task_spec.get("kind")
    if kind not in _TASKS:
        raise ValueError(f"unknown task kind: {kind!r}")
    trial = _TASKS[kind](task_spec, method_spec, alpha)
    root = np.random.SeedSequence(seed)
    covered = 0
    widths = []
    for child in root.spawn(trials):
        ok, width = trial(np.random.default_rng(child))
        covered += int(ok)
        widths.append(width)
    return {
        "task": dict(task_spec),
        "method": dict(method_spec),
        "trials": trials,
        "alpha": alpha,
        "seed": seed,
        "empirical_coverage": covered / trials,
        "mc_sigma": math.sqrt(alpha * (1.0 - alpha) / trials),
        "mean_width": float(np.mean(widths)),
    }
