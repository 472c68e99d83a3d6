"""Set-imputed e-processes: betting on penalized imputations.

An e-process multiplies wealth by ``rescale(v, eta) = 1 + eta * (v - 1)``
where ``v`` is the penalized imputation ``inf e(C(X)) - span * err`` of a
positive bounded component e. Under the null the imputed factor has
conditional mean at most one, so wealth is a test supermartingale and
crossing ``1 / alpha`` is an anytime-valid rejection.

Bets are clamped so every factor stays strictly positive regardless of the
stream; wealth is accounted in log domain. The deployed-model risk monitor
uses the composed single-factor form (bet and penalty inside one affine
factor, with the bet reused as the component's stake); the generic
:func:`cppi_step` path keeps the penalty inside the imputation and the
rescale outside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .datamodel import FiniteSet, Interval, PredictionSet, inf_image

__all__ = [
    "EComponent",
    "EProcessState",
    "BettingStrategy",
    "fixed_bets",
    "agrapa_bets",
    "rescale",
    "eta_range",
    "positivity_cap",
    "clamp_eta",
    "agrapa_eta",
    "component_inf",
    "cppi_step",
    "ville_reject",
    "ConfidenceSequenceResult",
    "evalue_confidence_sequence",
    "risk_monitor_component",
    "risk_monitor_step",
    "growth_rate_err_coefficient",
    "MonitorResult",
    "run_risk_monitor",
]

_ETA_MARGIN = 1e-9


@dataclass(frozen=True)
class EComponent:
    """One multiplicative component of an e-value, bounded in [lower, upper]
    with lower > 0.

    ``fn`` maps a label (or an imputation argument such as a miss indicator)
    to the component value and must broadcast over numpy arrays. The shape
    fields select the interval image rule, as on BoundedFunctional.
    """

    name: str
    fn: Callable
    lower: float
    upper: float
    shape: str = "generic"
    jump: float | None = None
    grid_resolution: float = 1e-4

    def __post_init__(self) -> None:
        if not (self.lower > 0.0):
            raise ValueError("component lower bound must be strictly positive")
        if self.upper < self.lower:
            raise ValueError("component bounds must satisfy lower <= upper")

    @property
    def span(self) -> float:
        return self.upper - self.lower

    def __call__(self, y):
        return self.fn(y)


def component_inf(comp: EComponent, pset: PredictionSet) -> float:
    """Infimum of the component over a prediction set."""
    return inf_image(comp, pset)


def rescale(e: float, eta: float) -> float:
    """The betting transform 1 + eta * (e - 1)."""
    return 1.0 + eta * (e - 1.0)


def eta_range(lower: float, upper: float, err: float) -> float:
    """Admissible upper limit for the bet given component bounds and err.

    Returns +inf when the denominator 1 - lower - span * err is not positive.
    """
    if lower <= 0.0:
        raise ValueError("component lower bound must be strictly positive")
    denom = 1.0 - lower - (upper - lower) * err
    if denom <= 0.0:
        return math.inf
    return 1.0 / denom


def positivity_cap(lower: float, upper: float, err: float) -> float:
    """Largest bet keeping the factor positive at the imputation floor.

    The floor of the penalized imputation is ``lower - span * err``; any bet
    strictly below ``1 / (1 - floor)`` keeps ``rescale`` positive.
    """
    floor = lower - (upper - lower) * err
    if floor >= 1.0:
        return math.inf
    return 1.0 / (1.0 - floor)


def clamp_eta(eta: float, lower: float, upper: float, err: float,
              cap_one: bool = False) -> float:
    """Clamp a bet into the admissible range with a safety margin."""
    cap = min(eta_range(lower, upper, err), positivity_cap(lower, upper, err))
    if math.isfinite(cap):
        cap -= _ETA_MARGIN
    if cap_one:
        cap = min(cap, 1.0)
    return min(max(eta, 0.0), cap)


@dataclass(frozen=True)
class EProcessState:
    """Running wealth of an e-process plus the EWMA bet statistics.

    Wealth is kept as log-wealth (with a compensation term so long streams
    accumulate without drift) and cannot overflow on million-step runs.
    ``ewma_mean``/``ewma_var`` track the unpenalized imputations that drive
    the adaptive bets; ``ewma_mean`` is None until the first update. The
    last bet and factor are kept for tracing; drivers that need a full
    history record the per-step outputs themselves.
    """

    log_wealth: float = 0.0
    step: int = 0
    ewma_mean: float | None = None
    ewma_var: float = 0.0
    ewma_decay: float = 0.01
    last_eta: float = 0.0
    last_factor: float = 1.0
    log_wealth_comp: float = 0.0

    @property
    def wealth(self) -> float:
        return math.exp(self.log_wealth)

    @property
    def wealth_log10(self) -> float:
        return self.log_wealth / math.log(10.0)

    def log_wealth_updated(self, log_factor: float) -> tuple[float, float]:
        """Compensated accumulation of one log factor."""
        y = log_factor - self.log_wealth_comp
        total = self.log_wealth + y
        comp = (total - self.log_wealth) - y
        return total, comp

    def ewma_updated(self, value: float) -> tuple[float, float]:
        """New (mean, var): variance recursion applied before the mean."""
        if self.ewma_mean is None:
            return value, 0.0
        a = self.ewma_decay
        var = (1.0 - a) * (self.ewma_var + a * (value - self.ewma_mean) ** 2)
        mean = (1.0 - a) * self.ewma_mean + a * value
        return mean, var


@dataclass(frozen=True)
class BettingStrategy:
    """Bet selection: a fixed stake or the adaptive mean/variance rule."""

    kind: str  # "fixed" | "agrapa"
    eta: float = 0.0
    threshold_mean: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("fixed", "agrapa"):
            raise ValueError(f"unknown betting strategy: {self.kind!r}")


def fixed_bets(eta: float) -> BettingStrategy:
    return BettingStrategy(kind="fixed", eta=eta)


def agrapa_bets(threshold_mean: float = 1.0) -> BettingStrategy:
    return BettingStrategy(kind="agrapa", threshold_mean=threshold_mean)


def agrapa_eta(state: EProcessState, lower: float, upper: float, err: float,
               threshold_mean: float) -> float:
    """Adaptive bet from the EWMA statistics of the imputations.

    The raw bet is num / (var + num^2) with
    num = mean - threshold_mean - span * err, clamped into the admissible
    range and capped at one. Before any EWMA update exists the bet is zero,
    keeping the sequence predictable at no risk.
    """
    if state.ewma_mean is None:
        return 0.0
    num = state.ewma_mean - threshold_mean - (upper - lower) * err
    denom = state.ewma_var + num * num
    if denom <= 0.0 or num <= 0.0:
        return 0.0
    return clamp_eta(num / denom, lower, upper, err, cap_one=True)


def cppi_step(state: EProcessState, comp: EComponent, pset: PredictionSet,
              err: float, strategy: BettingStrategy) -> EProcessState:
    """Advance the e-process by one observation.

    Computes the penalized imputation ``v = inf comp(set) - span * err``,
    picks the bet, multiplies wealth by ``rescale(v, eta)`` and refreshes the
    EWMA statistics with the unpenalized imputation. The bet clamp guarantees
    a strictly positive factor for components that honor their bounds.
    """
    imputed = component_inf(comp, pset)
    v = imputed - comp.span * err
    if strategy.kind == "fixed":
        eta = clamp_eta(strategy.eta, comp.lower, comp.upper, err)
    else:
        eta = agrapa_eta(state, comp.lower, comp.upper, err, strategy.threshold_mean)
    factor = rescale(v, eta)
    if factor <= 0.0:
        raise ValueError(
            f"non-positive factor {factor}: component value {imputed} escapes "
            f"its declared bounds [{comp.lower}, {comp.upper}]"
        )
    mean, var = state.ewma_updated(imputed)
    log_wealth, comp_term = state.log_wealth_updated(math.log(factor))
    return EProcessState(
        log_wealth=log_wealth,
        step=state.step + 1,
        ewma_mean=mean, ewma_var=var, ewma_decay=state.ewma_decay,
        last_eta=eta, last_factor=factor,
        log_wealth_comp=comp_term,
    )


def ville_reject(state: EProcessState, alpha: float) -> bool:
    """Anytime-valid rejection: wealth at or above 1 / alpha.

    Once true at any step the decision is final for the stopped test.
    """
    if not (0.0 < alpha < 1.0):
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return state.log_wealth >= math.log(1.0 / alpha)


@dataclass(frozen=True)
class ConfidenceSequenceResult:
    """Anytime-valid confidence set over a parameter grid."""

    accepted: tuple[float, ...]
    hull: tuple[float, float] | None

    def contains(self, theta: float) -> bool:
        return self.hull is not None and self.hull[0] <= theta <= self.hull[1]


def evalue_confidence_sequence(family: Mapping[float, EProcessState],
                               alpha: float) -> ConfidenceSequenceResult:
    """Parameters whose e-process has not rejected.

    A theta is excluded exactly when :func:`ville_reject` fires for its
    process, so set membership and the sequential test are one decision.
    """
    if len(family) == 0:
        raise ValueError("empty e-process family")
    accepted = tuple(sorted(th for th, st in family.items()
                            if not ville_reject(st, alpha)))
    hull = (accepted[0], accepted[-1]) if accepted else None
    return ConfidenceSequenceResult(accepted=accepted, hull=hull)


def risk_monitor_component(val_risk: float, eps_tol: float, lam: float) -> EComponent:
    """Component e(m) = 1 + lam * (m - (val_risk + eps_tol)) on the miss
    indicator m of a deployed model.

    The stake must satisfy 0 < lam < 1 / (val_risk + eps_tol), which keeps
    the component's lower bound strictly positive.
    """
    c = val_risk + eps_tol
    if not (0.0 < c < 1.0):
        raise ValueError("val_risk + eps_tol must lie in (0, 1)")
    if not (0.0 < lam < 1.0 / c):
        raise ValueError(f"stake must lie in (0, {1.0 / c:.6g})")
    return EComponent(
        name=f"risk_monitor(c={c}, lam={lam})",
        fn=lambda m: 1.0 + lam * (np.asarray(m, dtype=float) - c),
        lower=1.0 - lam * c,
        upper=1.0 + lam * (1.0 - c),
        shape="monotone",
    )


def risk_monitor_step(state: EProcessState, miss_set: PredictionSet | int,
                      val_risk: float, eps_tol: float,
                      err: float) -> EProcessState:
    """One monitoring step in the composed single-factor form.

    The imputed miss indicator is the infimum of the indicator over the
    prediction set. The adaptive bet comes from the EWMA statistics of past
    imputed indicators against the safety level ``val_risk + eps_tol`` with a
    unit-range penalty, and is reused as the component stake, so the factor
    is ``1 + eta * (eta * (m - c) - eta * err)``.
    """
    c = val_risk + eps_tol
    if not (0.0 < c < 1.0):
        raise ValueError("val_risk + eps_tol must lie in (0, 1)")
    if c + err >= 1.0:
        raise ValueError("val_risk + eps_tol + err must stay below 1")
    if isinstance(miss_set, (FiniteSet, Interval)):
        m = float(min(miss_set.labels)) if isinstance(miss_set, FiniteSet) \
            else float(miss_set.lo)
    else:
        m = float(miss_set)
    # Unit-stake reference bounds: the indicator spans [0, 1], so the
    # component range width in the bet numerator is one.
    eta = agrapa_eta(state, 1.0 - c, 2.0 - c, err, threshold_mean=c)
    factor = 1.0 + eta * (eta * (m - c) - eta * err)
    mean, var = state.ewma_updated(m)
    log_wealth, comp_term = state.log_wealth_updated(math.log(factor))
    return EProcessState(
        log_wealth=log_wealth,
        step=state.step + 1,
        ewma_mean=mean, ewma_var=var, ewma_decay=state.ewma_decay,
        last_eta=eta, last_factor=factor,
        log_wealth_comp=comp_term,
    )


def growth_rate_err_coefficient(lower: float, upper: float, eta: float) -> float:
    """Sensitivity of the growth-rate penalty to miscoverage,
    log(upper / lower) + eta * (upper - lower); non-decreasing in eta."""
    if lower <= 0.0:
        raise ValueError("component lower bound must be strictly positive")
    return math.log(upper / lower) + eta * (upper - lower)


@dataclass(frozen=True)
class MonitorResult:
    """Outcome of a monitoring run over a risk stream."""

    steps: int
    first_rejection: int | None
    state: EProcessState
    calibrator: "OnlineCalibratorState"

    @property
    def rejected(self) -> bool:
        return self.first_rejection is not None


def run_risk_monitor(records, val_risk: float, eps_tol: float, gamma: float,
                     step_size: float, alpha: float,
                     init_threshold: float = -0.5, ewma_decay: float = 0.01,
                     on_step: Callable | None = None) -> MonitorResult:
    """Drive the risk monitor over a stream of (miss probability, label).

    Each record is ``(rho, miss)`` with ``rho`` the residual model's miss
    probability for the step and ``miss`` the true miss indicator or None
    when unrevealed. Per step, the current online threshold turns ``rho``
    into a prediction set over the miss indicator (score ``-p(m)``, empty
    sets widened to {0, 1}); the e-process is advanced on the imputed
    indicator with declared miscoverage ``gamma``; labelled steps then update
    the threshold. ``on_step(step, state, rejected)`` is invoked after every
    step when given.
    """
    from .conformal import OnlineCalibratorState, online_update

    state = EProcessState(ewma_decay=ewma_decay)
    calibrator = OnlineCalibratorState(threshold=init_threshold,
                                       step_size=step_size, target=gamma)
    first_rejection: int | None = None
    step = 0
    for rho, miss in records:
        step += 1
        in0 = -(1.0 - rho) <= calibrator.threshold
        in1 = -rho <= calibrator.threshold
        if not (in0 or in1):
            in0 = in1 = True
        imputed = 0 if in0 else 1
        state = risk_monitor_step(state, imputed, val_risk, eps_tol, gamma)
        rejected = ville_reject(state, alpha)
        if rejected and first_rejection is None:
            first_rejection = step
        if miss is not None:
            covered = in1 if miss else in0
            calibrator = online_update(calibrator, covered)
        if on_step is not None:
            on_step(step, state, rejected)
    return MonitorResult(steps=step, first_rejection=first_rejection,
                         state=state, calibrator=calibrator)
