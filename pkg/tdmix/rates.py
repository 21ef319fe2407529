"""Power-law rate fits and split-sample verification of two-term error envelopes."""

import logging
import math
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from shared.types import (
    BoundReport,
    BoundSpec,
    BoundVariant,
    IterateHistory,
    PowerLawFit,
    QuantileEnvelope,
    StepSchedule,
)
from tdmix.errors import InsufficientSeeds, InvalidParameter, NonPositiveValue, WindowTooSmall
from tdmix.td import error_matrix, partial_step_sums

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 6
DOMINATION_RTOL = 1e-9
CI_LEVEL = 0.95

Window = Tuple[Optional[float], Optional[float]]

# Variants whose exponent depends only on (beta, eta, holder_gamma).
COMPARED_VARIANTS = (BoundVariant.LINEAR_HP, BoundVariant.RELU_DEEP, BoundVariant.GEOMETRIC)


def _window_mask(ts: np.ndarray, window: Optional[Window]) -> np.ndarray:
    low, high = window if window is not None else (None, None)
    mask = np.ones(ts.shape, dtype=bool)
    if low is not None:
        mask &= ts >= low
    if high is not None:
        mask &= ts <= high
    return mask


def _windowed(ts, ys, window: Optional[Window]) -> Tuple[np.ndarray, np.ndarray, Tuple[float, float]]:
    ts = np.asarray(ts, dtype=float)
    ys = np.asarray(ys, dtype=float)
    mask = _window_mask(ts, window)
    ts, ys = ts[mask], ys[mask]
    if len(ts) < MIN_FIT_POINTS:
        raise WindowTooSmall(f"fit needs at least {MIN_FIT_POINTS} points, window has {len(ts)}")
    return ts, ys, (float(ts.min()), float(ts.max()))


def fit_power_law(ts: Sequence[float], ys: Sequence[float], window: Optional[Window] = None) -> PowerLawFit:
    """OLS of log y on log t; exponent is the negated slope."""
    ts, ys, bounds = _windowed(ts, ys, window)
    if np.any(ys <= 0):
        raise NonPositiveValue(f"power-law fit needs y > 0, smallest value is {ys.min():.3e}")
    if np.any(ts <= 0):
        raise NonPositiveValue("power-law fit needs t > 0")
    result = stats.linregress(np.log(ts), np.log(ys))
    return PowerLawFit(
        exponent=-float(result.slope),
        log_intercept=float(result.intercept),
        r_squared=float(result.rvalue ** 2),
        window=bounds,
        n_points=len(ts),
        stderr=float(result.stderr),
    )


def fit_geometric(ts: Sequence[float], ys: Sequence[float], window: Optional[Window] = None) -> Tuple[float, float]:
    """Semi-log fit log y = a + t log(rate); returns (rate, r_squared)."""
    ts, ys, _ = _windowed(ts, ys, window)
    if np.any(ys <= 0):
        raise NonPositiveValue("geometric fit needs y > 0")
    result = stats.linregress(ts, np.log(ys))
    return float(np.exp(result.slope)), float(result.rvalue ** 2)


def predicted_exponent(spec: BoundSpec) -> float:
    """Decay exponent of the slower envelope term."""
    beta, eta, gamma = spec.beta, spec.eta, spec.holder_gamma
    if spec.variant in (BoundVariant.LINEAR_HP, BoundVariant.NONLINEAR_HP):
        return min(beta / 2.0, eta * gamma)
    if spec.variant == BoundVariant.MOMENT_P:
        return min(beta / 2.0, eta * gamma / spec.p)
    if spec.variant == BoundVariant.RELU_DEEP:
        return min((beta - 1.0) / 2.0, eta * beta)
    if spec.variant == BoundVariant.GEOMETRIC:
        return min(0.5, eta * gamma)
    return eta


def _basis(spec: BoundSpec, schedule: StepSchedule, ts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    ts = np.asarray(ts, dtype=float)
    if np.any(ts < 1):
        raise InvalidParameter("envelope is defined for t >= 1")
    alphas = schedule.c_alpha * ts ** (-schedule.eta)
    variant = spec.variant
    if variant in (BoundVariant.LINEAR_HP, BoundVariant.NONLINEAR_HP):
        return ts ** (-spec.beta / 2.0), alphas ** spec.holder_gamma
    if variant == BoundVariant.MOMENT_P:
        return ts ** (-spec.beta / 2.0), alphas ** (spec.holder_gamma / spec.p)
    if variant == BoundVariant.RELU_DEEP:
        return ts ** (-(spec.beta - 1.0) / 2.0), ts ** (-spec.eta * spec.beta)
    if variant == BoundVariant.GEOMETRIC:
        return np.log(np.maximum(ts, np.e)) / np.sqrt(ts), alphas ** spec.holder_gamma
    if spec.lambda_min is None or spec.lipschitz is None or spec.initial_error is None:
        raise InvalidParameter("gronwall envelope needs lambda_min, lipschitz and initial_error")
    sums = partial_step_sums(schedule, ts.astype(np.int64))
    previous = schedule.c_alpha * np.maximum(ts - 1.0, 1.0) ** (-schedule.eta)
    return (
        np.exp(-spec.lambda_min * sums) * spec.initial_error,
        (spec.lipschitz / spec.lambda_min) * previous,
    )


def bound_curve(spec: BoundSpec, schedule: StepSchedule, ts: Sequence[float]) -> np.ndarray:
    """C * first(t) + C' * second(t) for the envelope form of `spec.variant`."""
    first, second = _basis(spec, schedule, np.asarray(ts))
    return spec.c * first + spec.c_prime * second


def quantile_curve(
    ts: Sequence[int], errors: np.ndarray, delta: float
) -> QuantileEnvelope:
    """Order-statistic (1 - delta)-quantile per column of `errors` with a binomial interval."""
    if not 0.0 < delta < 1.0:
        raise InvalidParameter(f"delta must lie in (0, 1), got {delta}")
    n = errors.shape[0]
    required = math.ceil(10.0 / delta - 1e-9)
    if n < required:
        raise InsufficientSeeds(required, n, "quantile envelope")
    ordered = np.sort(errors, axis=0)
    rank = min(max(math.ceil((1.0 - delta) * n - 1e-9), 1), n)
    tail = (1.0 - CI_LEVEL) / 2.0
    low = int(max(stats.binom.ppf(tail, n, 1.0 - delta), 1))
    high = int(min(stats.binom.ppf(1.0 - tail, n, 1.0 - delta) + 1, n))
    return QuantileEnvelope(
        ts=ts,
        quantile=ordered[rank - 1],
        ci_low=ordered[low - 1],
        ci_high=ordered[high - 1],
        delta=delta,
        n_seeds=n,
    )


def quantile_envelope(
    histories: Sequence[IterateHistory], theta_star: np.ndarray, delta: float
) -> QuantileEnvelope:
    ts, errors = error_matrix(histories, theta_star)
    return quantile_curve(ts, errors, delta)


def _exponent_or_none(ts: np.ndarray, ys: np.ndarray, window: Optional[Window]) -> Optional[float]:
    try:
        return fit_power_law(ts, ys, window).exponent
    except (WindowTooSmall, NonPositiveValue) as e:
        logger.debug(f"No tail exponent: {e}")
        return None


def verify_error_bound(
    ts: Sequence[int],
    errors: np.ndarray,
    spec: BoundSpec,
    schedule: StepSchedule,
    split: float = 0.5,
    window: Optional[Window] = (1000, None),
) -> BoundReport:
    """Fit (C, C') on the first batch of rows and check domination on the rest.

    Rows of `errors` are seeds, columns checkpoints.
    """
    ts = np.asarray(ts)
    n = errors.shape[0]
    cut = int(round(split * n))
    batch_a, batch_b = errors[:cut], errors[cut:]
    required = math.ceil(10.0 / spec.delta - 1e-9)
    if min(len(batch_a), len(batch_b)) < required:
        raise InsufficientSeeds(2 * required, n, "split-sample bound verification")

    mask = _window_mask(ts, window) & (ts >= 1)
    if not np.any(mask):
        raise WindowTooSmall("no checkpoints inside the verification window")
    t_fit = ts[mask]
    q_a = quantile_curve(ts, batch_a, spec.delta).quantile[mask]
    q_b = quantile_curve(ts, batch_b, spec.delta).quantile[mask]

    first, second = _basis(spec, schedule, t_fit)
    (c, c_prime), _ = optimize.nnls(np.column_stack([first, second]), q_a)
    envelope_a = c * first + c_prime * second
    positive = envelope_a > 0
    if np.any(positive):
        inflation = float(np.max(q_a[positive] / envelope_a[positive]))
        if inflation > 1.0:
            c, c_prime = c * inflation, c_prime * inflation
    envelope = c * first + c_prime * second
    domination_a = bool(np.all(envelope >= q_a * (1.0 - DOMINATION_RTOL)))
    if not domination_a:
        logger.info(f"Envelope {spec.variant.value} cannot majorize the calibration batch")
    domination = bool(np.all(envelope >= q_b * (1.0 - DOMINATION_RTOL)))

    q_all = quantile_curve(ts, errors, spec.delta).quantile
    fitted_exponent = _exponent_or_none(ts[mask], q_all[mask], None)
    predicted = predicted_exponent(spec)

    variant_gaps: Dict[str, float] = {}
    closest = None
    if fitted_exponent is not None:
        for variant in COMPARED_VARIANTS:
            other = spec.model_copy(update={"variant": variant})
            variant_gaps[variant.value] = abs(fitted_exponent - predicted_exponent(other))
        closest = min(variant_gaps, key=variant_gaps.get)

    return BoundReport(
        variant=spec.variant,
        fitted={"C": float(c), "Cp": float(c_prime)},
        quantile_exponent=fitted_exponent,
        predicted_exponent=predicted,
        exponent_gap=None if fitted_exponent is None else fitted_exponent - predicted,
        domination=domination,
        domination_batch_a=domination_a,
        slack_min=float(np.min(envelope - q_b)),
        variant_gaps=variant_gaps,
        closest_variant=closest,
    )


def verify_bound(
    histories: Sequence[IterateHistory],
    spec: BoundSpec,
    schedule: StepSchedule,
    theta_star: np.ndarray,
    split: float = 0.5,
    window: Optional[Window] = (1000, None),
) -> BoundReport:
    """Split-sample envelope check of ||theta_t - theta*|| over seed histories."""
    ts, errors = error_matrix(histories, theta_star)
    return verify_error_bound(ts, errors, spec, schedule, split=split, window=window)
