"""Fixed points and the martingale-plus-remainder split of the TD(0) error."""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from shared.types import (
    BinTestReport,
    Decomposition,
    FeatureMap,
    FixedPoint,
    FixedPointMethod,
    IterateHistory,
    JacobianEstimate,
    LinearModel,
    OrthogonalityReport,
    RemainderExponentReport,
    SeriesCI,
    StepSchedule,
    TransitionKernel,
)
from tdmix.approx import ValueModel, grad, parameters, values, with_parameters
from tdmix.chain import Start, stationary_distribution
from tdmix.errors import (
    DimensionMismatch,
    InsufficientSeeds,
    InvalidParameter,
    MissingStepData,
    NonPositiveValue,
    SingularSystem,
    WindowTooSmall,
)
from tdmix.rates import Window, fit_power_law
from tdmix.seeding import derive_seed, generator
from tdmix.td import run_td, td_step

logger = logging.getLogger(__name__)

MIN_CURVE_SEEDS = 30
CONDITION_LIMIT = 1e12
REPLAY_TOL = 1e-8
Z_LIMIT = 4.0
BOOTSTRAP_SAMPLES = 1000
REFERENCE_TAIL = 0.5


def linear_system(
    kernel: TransitionKernel, features: FeatureMap, discount: float
) -> Tuple[np.ndarray, np.ndarray]:
    """A = Phi^T D (Phi - discount P Phi) and b = Phi^T D r."""
    if features.n_states != kernel.n_states:
        raise DimensionMismatch(
            f"features cover {features.n_states} states, kernel has {kernel.n_states}"
        )
    pi = stationary_distribution(kernel)
    phi = features.phi
    weighted = phi.T * pi
    A = weighted @ (phi - discount * (kernel.P @ phi))
    b = weighted @ kernel.rewards
    return A, b


def linear_fixed_point(
    kernel: TransitionKernel, features: FeatureMap, discount: float
) -> FixedPoint:
    """theta* = A^-1 b, the projected Bellman fixed point under pi."""
    A, b = linear_system(kernel, features, discount)
    if np.linalg.matrix_rank(A) < A.shape[0] or np.linalg.cond(A) > CONDITION_LIMIT:
        raise SingularSystem("projected Bellman matrix is singular; features are not full rank under pi")
    theta_star = linalg.solve(A, b)
    residual = float(np.linalg.norm(b - A @ theta_star))
    return FixedPoint(
        theta_star=theta_star, residual=residual, method=FixedPointMethod.DIRECT_SOLVE
    )


def conditional_td_mean(kernel: TransitionKernel, model: ValueModel, discount: float) -> np.ndarray:
    """E[delta | s] = r(s) + discount * (P v)(s) - v(s) for every state."""
    v = values(model)
    return kernel.rewards + discount * (kernel.P @ v) - v


def expected_update(
    kernel: TransitionKernel,
    model: ValueModel,
    discount: float,
    state: Optional[int] = None,
) -> np.ndarray:
    """Mean update field; averaged over pi, or conditioned on the current `state`."""
    mean_delta = conditional_td_mean(kernel, model, discount)
    if state is not None:
        return mean_delta[state] * grad(model, state)
    pi = stationary_distribution(kernel)
    if isinstance(model, LinearModel):
        return model.features.phi.T @ (pi * mean_delta)
    field = np.zeros(len(parameters(model)))
    for s in np.flatnonzero(pi):
        field += pi[s] * mean_delta[s] * grad(model, int(s))
    return field


def nonlinear_fixed_point(
    kernel: TransitionKernel,
    model0: ValueModel,
    schedule: StepSchedule,
    discount: float,
    T: int,
    seed: int,
    start: Start = "stationary",
    tail: float = REFERENCE_TAIL,
) -> FixedPoint:
    """Reference point from one long TD(0) run.

    theta* is the average of the iterates over the last `tail` share of the T steps;
    the residual is ||expected_update|| at that average.
    """
    if not 0.0 < tail <= 1.0:
        raise InvalidParameter(f"tail must be in (0, 1], got {tail}")
    first = T - max(1, math.ceil(tail * T)) + 1
    total = np.zeros(len(parameters(model0)))
    count = 0

    def accumulate(t: int, before: ValueModel, after: ValueModel, alpha: float) -> None:
        nonlocal total, count
        if t >= first:
            total += parameters(after)
            count += 1

    run_td(
        kernel, model0, schedule, discount, T, seed, start=start, record_stream=False, callback=accumulate
    )
    reference = with_parameters(model0, total / count)
    residual = float(np.linalg.norm(expected_update(kernel, reference, discount)))
    logger.info(f"Reference fixed point from the last {count} of T={T} steps: residual={residual:.3e}")
    return FixedPoint(
        theta_star=parameters(reference),
        residual=residual,
        method=FixedPointMethod.LONG_RUN_AVERAGE,
    )


def decompose(
    history: IterateHistory, kernel: TransitionKernel, theta_star: np.ndarray
) -> Decomposition:
    """Replay the logged stream and split theta_t - theta* into martingale and drift.

    d_k = alpha_k (delta_k - E[delta_k | s_k, theta_k]) grad_k, with the
    conditional mean taken exactly from the kernel row of s_k.
    """
    if not history.full_stream:
        raise MissingStepData("history was recorded without the per-step stream")
    theta_star = np.asarray(theta_star, dtype=float)
    model = history.model0
    theta0 = parameters(model)
    if theta_star.shape != theta0.shape:
        raise DimensionMismatch(f"theta* has shape {theta_star.shape}, model has {theta0.shape}")

    T = history.n_updates
    increments = np.empty((T, theta0.shape[0]))
    checkpoints = history.checkpoints
    martingale = np.empty((len(checkpoints), theta0.shape[0]))
    running = np.zeros(theta0.shape[0])
    marker = 0
    if checkpoints[0] == 0:
        martingale[0] = running
        marker = 1

    for k in range(T):
        s, s_next = int(history.states[k]), int(history.next_states[k])
        r, alpha = float(history.rewards[k]), float(history.alphas[k])
        v = values(model)
        delta = r + history.discount * v[s_next] - v[s]
        mean_delta = kernel.rewards[s] + history.discount * (kernel.P[s] @ v) - v[s]
        g = grad(model, s)
        increments[k] = alpha * (delta - mean_delta) * g
        running = running + increments[k]
        model = td_step(model, (s, r, s_next), alpha, history.discount)
        if marker < len(checkpoints) and checkpoints[marker] == k + 1:
            martingale[marker] = running
            drift = np.max(np.abs(parameters(model) - history.thetas[marker]))
            if drift > REPLAY_TOL:
                logger.warning(f"Replay departs from checkpoint t={k + 1} by {drift:.3e}")
            marker += 1

    errors = history.thetas - theta_star
    return Decomposition(
        ts=checkpoints,
        errors=errors,
        martingale=martingale,
        remainder=(history.thetas - theta0) - martingale,
        increments=increments,
        step_states=history.states,
        theta0=theta0,
        theta_star=theta_star,
    )


def reconstruction_error(decomposition: Decomposition) -> float:
    """max |theta_0 + M_t + R_t - theta* - e_t| over checkpoints."""
    rebuilt = (
        decomposition.theta0
        + decomposition.martingale
        + decomposition.remainder
        - decomposition.theta_star
    )
    return float(np.max(np.abs(rebuilt - decomposition.errors)))


def _require_seeds(count: int, what: str) -> None:
    if count < MIN_CURVE_SEEDS:
        raise InsufficientSeeds(MIN_CURVE_SEEDS, count, what)


def _bootstrap_ci(
    samples: np.ndarray, statistic, seed: int, level: float = 0.95
) -> Tuple[np.ndarray, np.ndarray]:
    """Percentile bootstrap over rows of `samples` for a column-wise statistic."""
    rng = generator(derive_seed(seed, "bootstrap"))
    n = samples.shape[0]
    draws = np.empty((BOOTSTRAP_SAMPLES, samples.shape[1]))
    for index in range(BOOTSTRAP_SAMPLES):
        draws[index] = statistic(samples[rng.integers(0, n, size=n)])
    tail = 100.0 * (1.0 - level) / 2.0
    return np.percentile(draws, tail, axis=0), np.percentile(draws, 100.0 - tail, axis=0)


def _column_fsum_mean(samples: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(column) / len(column) for column in samples.T])


def martingale_variance_curve(
    decompositions: Sequence[Decomposition], seed: int = 0
) -> SeriesCI:
    """Mean of ||M_t||^2 across seeds with bootstrap intervals."""
    _require_seeds(len(decompositions), "martingale variance curve")
    ts = decompositions[0].ts
    squared = np.stack([d.martingale_norm ** 2 for d in decompositions])
    low, high = _bootstrap_ci(squared, lambda rows: rows.mean(axis=0), seed)
    return SeriesCI(
        ts=ts, value=_column_fsum_mean(squared), ci_low=low, ci_high=high, n_seeds=len(decompositions)
    )


def moment_curve(
    histories: Sequence[IterateHistory],
    theta_star: np.ndarray,
    p: int = 2,
    seed: int = 0,
) -> SeriesCI:
    """(E ||theta_t - theta*||^p)^(1/p) across seeds."""
    if p not in (2, 4):
        raise InvalidParameter(f"moment order must be 2 or 4, got {p}")
    _require_seeds(len(histories), "moment curve")
    ts = histories[0].checkpoints
    powered = np.stack([np.linalg.norm(h.thetas - theta_star, axis=1) ** p for h in histories])

    def statistic(rows: np.ndarray) -> np.ndarray:
        return rows.mean(axis=0) ** (1.0 / p)

    low, high = _bootstrap_ci(powered, statistic, seed)
    return SeriesCI(
        ts=ts,
        value=_column_fsum_mean(powered) ** (1.0 / p),
        ci_low=low,
        ci_high=high,
        n_seeds=len(histories),
    )


def martingale_bin_test(
    decompositions: Sequence[Decomposition],
    n_time_bins: int = 8,
    min_count: int = 30,
    z_limit: float = Z_LIMIT,
    required_fraction: float = 0.95,
) -> BinTestReport:
    """Per (state, log-time bin, coordinate) mean of d_k, compared with 4 standard errors."""
    T = decompositions[0].increments.shape[0]
    edges = np.unique(np.geomspace(1, T + 1, n_time_bins + 1).astype(np.int64))
    increments = np.concatenate([d.increments for d in decompositions])
    states = np.concatenate([d.step_states for d in decompositions])
    steps = np.tile(np.arange(1, T + 1), len(decompositions))
    time_bin = np.searchsorted(edges, steps, side="right") - 1

    z_scores: List[float] = []
    for state in np.unique(states):
        for bin_index in np.unique(time_bin):
            rows = increments[(states == state) & (time_bin == bin_index)]
            if len(rows) < min_count:
                continue
            mean = rows.mean(axis=0)
            se = rows.std(axis=0, ddof=1) / np.sqrt(len(rows))
            z = np.divide(np.abs(mean), se, out=np.zeros_like(mean), where=se > 0)
            z_scores.extend(z.tolist())
    if not z_scores:
        return BinTestReport(n_bins=0, pass_fraction=1.0, max_abs_z=0.0, passed=True)
    z_scores = np.array(z_scores)
    fraction = float(np.mean(z_scores <= z_limit))
    return BinTestReport(
        n_bins=len(z_scores),
        pass_fraction=fraction,
        max_abs_z=float(z_scores.max()),
        passed=fraction >= required_fraction,
    )


def default_step_pairs(T: int) -> List[Tuple[int, int]]:
    pairs = [(0, 1), (0, 9), (9, 99), (99, 999), (999, 9999)]
    return [(j, k) for j, k in pairs if k < T]


def increment_orthogonality(
    decompositions: Sequence[Decomposition],
    pairs: Optional[Sequence[Tuple[int, int]]] = None,
    z_limit: float = Z_LIMIT,
) -> OrthogonalityReport:
    """Across seeds, <d_j, d_k> for j != k should average to zero."""
    _require_seeds(len(decompositions), "increment orthogonality")
    T = decompositions[0].increments.shape[0]
    pairs = list(pairs) if pairs is not None else default_step_pairs(T)
    z_scores = []
    for j, k in pairs:
        if j == k:
            raise InvalidParameter("orthogonality pairs need distinct steps")
        products = np.array([d.increments[j] @ d.increments[k] for d in decompositions])
        se = products.std(ddof=1) / np.sqrt(len(products))
        z_scores.append(float(abs(products.mean()) / se) if se > 0 else 0.0)
    return OrthogonalityReport(
        pairs=pairs, z_scores=z_scores, passed=all(z <= z_limit for z in z_scores)
    )


def estimate_update_jacobian(
    kernel: TransitionKernel, model: ValueModel, discount: float, h: float = 1e-5
) -> JacobianEstimate:
    """Central differences of -expected_update around the model's parameters."""
    theta = parameters(model)
    H = np.empty((theta.shape[0], theta.shape[0]))
    for j in range(theta.shape[0]):
        step = np.zeros_like(theta)
        step[j] = h
        forward = expected_update(kernel, with_parameters(model, theta + step), discount)
        backward = expected_update(kernel, with_parameters(model, theta - step), discount)
        H[:, j] = -(forward - backward) / (2.0 * h)
    eigenvalues = np.linalg.eigvalsh(0.5 * (H + H.T))
    lambda_min = float(eigenvalues[0])
    if lambda_min <= 0:
        logger.info(f"Symmetrized update Jacobian is not positive definite (lambda_min={lambda_min:.3e})")
    return JacobianEstimate(
        H=H, eigenvalues=eigenvalues, lambda_min=lambda_min, positive_definite=lambda_min > 0
    )


def remainder_exponent_report(
    decompositions: Sequence[Decomposition],
    holder_gamma: float,
    eta: float,
    window: Optional[Window] = (1000, None),
) -> Optional[RemainderExponentReport]:
    """Fit the mean ||R_t|| decay and say whether gamma/2 or eta*gamma is closer."""
    ts = decompositions[0].ts
    mean_norm = np.mean(np.stack([d.remainder_norm for d in decompositions]), axis=0)
    usable = ts >= 1
    try:
        fit = fit_power_law(ts[usable], mean_norm[usable], window)
    except (WindowTooSmall, NonPositiveValue) as e:
        logger.info(f"Remainder exponent not fitted: {e}")
        return None
    half_holder = holder_gamma / 2.0
    eta_holder = eta * holder_gamma
    closer = (
        "half-holder"
        if abs(fit.exponent - half_holder) <= abs(fit.exponent - eta_holder)
        else "eta-holder"
    )
    return RemainderExponentReport(
        fitted_exponent=fit.exponent,
        half_holder=half_holder,
        eta_holder=eta_holder,
        closer=closer,
    )
