"""Dependence diagnostics: exact mixing curves, blocks, maximal coupling and tail checks."""

import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.types import (
    BlockCovarianceReport,
    BlockSet,
    ConcentrationReport,
    ConcentrationRow,
    CouplingPath,
    CouplingReport,
    MixingEstimate,
    MixingRegime,
    PowerLawFit,
    TransitionKernel,
    Trajectory,
)
from tdmix.chain import Start, sample_trajectories, stationary_distribution, tv_curve
from tdmix.errors import (
    DimensionMismatch,
    InsufficientSeeds,
    InvalidParameter,
    NonPositiveValue,
    TrajectoryTooShort,
    WindowTooSmall,
)
from tdmix.rates import Window, fit_geometric, fit_power_law
from tdmix.seeding import generator

logger = logging.getLogger(__name__)

NUMERICAL_FLOOR = 1e-12
Z_LIMIT = 4.0
MIN_BLOCK_SEEDS = 100
MIN_TAIL_SEEDS = 1000

Functional = Union[Sequence[float], np.ndarray, Callable[[int], float]]


def _state_vector(functional: Functional, n_states: int) -> np.ndarray:
    if callable(functional):
        return np.array([functional(state) for state in range(n_states)], dtype=float)
    vector = np.asarray(functional, dtype=float)
    if vector.shape != (n_states,):
        raise DimensionMismatch(f"functional needs {n_states} entries, got {vector.shape}")
    return vector


def lag_grid(t_min: int, t_max: int, ratio: float = 1.15) -> np.ndarray:
    """Geometric integer grid on [t_min, t_max], endpoints included."""
    grid = {t_min, t_max}
    t = float(t_min)
    while t <= t_max:
        grid.add(int(round(t)))
        t *= ratio
    return np.array(sorted(g for g in grid if t_min <= g <= t_max), dtype=np.int64)


def mixing_estimate(lags: Sequence[int], decay: Sequence[float], window: Optional[Window] = None) -> MixingEstimate:
    """Power-law fit on the window and a semi-log comparison to flag geometric decay."""
    lags = np.asarray(lags, dtype=np.int64)
    decay = np.abs(np.asarray(decay, dtype=float))
    low = window[0] if window and window[0] is not None else int(lags.min())
    high = window[1] if window and window[1] is not None else int(lags.max())
    usable = (lags >= max(low, 1)) & (lags <= high) & (decay >= NUMERICAL_FLOOR)

    fit: Optional[PowerLawFit] = None
    regime = MixingRegime.DEGENERATE
    rate = None
    try:
        fit = fit_power_law(lags[usable], decay[usable])
        rate, geometric_r2 = fit_geometric(lags[usable], decay[usable])
        regime = MixingRegime.GEOMETRIC if geometric_r2 > fit.r_squared else MixingRegime.POLYNOMIAL
        logger.debug(
            f"Mixing fit exponent={fit.exponent:.3f} r2={fit.r_squared:.4f} semi-log r2={geometric_r2:.4f}"
        )
    except (WindowTooSmall, NonPositiveValue) as e:
        logger.debug(f"Mixing curve not fitted: {e}")
    return MixingEstimate(
        lags=lags,
        values=decay,
        fit=fit,
        window=(int(low), int(high)),
        regime=regime,
        geometric_rate=rate if regime == MixingRegime.GEOMETRIC else None,
    )


def lag_covariance(
    kernel: TransitionKernel, f: Functional, g: Functional, lags: Sequence[int]
) -> np.ndarray:
    """Exact stationary Cov(f(x_t), g(x_{t+k})) = f^T D P^k g - (pi f)(pi g)."""
    f = _state_vector(f, kernel.n_states)
    g = _state_vector(g, kernel.n_states)
    lags = np.asarray(lags, dtype=np.int64)
    if lags.size and lags.min() < 0:
        raise InvalidParameter("lags must be nonnegative")
    pi = stationary_distribution(kernel)
    weighted = pi * f
    product = (pi @ f) * (pi @ g)
    out = np.empty(len(lags))
    propagated = g.copy()
    step = 0
    for index in np.argsort(lags, kind="stable"):
        while step < lags[index]:
            propagated = kernel.P @ propagated
            step += 1
        out[index] = weighted @ propagated - product
    return out


def covariance_mixing(
    kernel: TransitionKernel,
    f: Functional,
    g: Functional,
    lags: Sequence[int],
    window: Optional[Window] = None,
) -> MixingEstimate:
    """|Cov_pi(f(x_t), g(x_{t+k}))| at each lag with a power-law fit."""
    return mixing_estimate(lags, np.abs(lag_covariance(kernel, f, g, lags)), window)


def tv_mixing(
    kernel: TransitionKernel, start: int, lags: Sequence[int], window: Optional[Window] = None
) -> MixingEstimate:
    """Exact TV to stationarity from `start` with a power-law fit."""
    return mixing_estimate(lags, tv_curve(kernel, start, lags), window)


def block_independence_curve(
    kernel: TransitionKernel, block_sizes: Sequence[int], window: Optional[Window] = None
) -> MixingEstimate:
    """max over starts of 0.5 ||e_s P^b - pi||_1 as a function of the gap b."""
    block_sizes = np.asarray(block_sizes, dtype=np.int64)
    pi = stationary_distribution(kernel)
    power = np.eye(kernel.n_states)
    step = 0
    worst = np.empty(len(block_sizes))
    for index in np.argsort(block_sizes, kind="stable"):
        while step < block_sizes[index]:
            power = power @ kernel.P
            step += 1
        worst[index] = 0.5 * np.abs(power - pi).sum(axis=1).max()
    return mixing_estimate(block_sizes, worst, window)


def make_blocks(trajectory: Trajectory, functional: Functional, b: int) -> BlockSet:
    """Sums of the functional over floor(n / b) consecutive blocks of the visited states."""
    if b < 1:
        raise InvalidParameter(f"block size must be >= 1, got {b}")
    states = trajectory.states
    n = len(states)
    if n < 2 * b:
        raise TrajectoryTooShort(f"{n} observations cannot hold two blocks of size {b}")
    if callable(functional):
        functional = _state_vector(functional, int(states.max()) + 1)
    observed = np.asarray(functional, dtype=float)[states]
    n_blocks = n // b
    sums = observed[: n_blocks * b].reshape(n_blocks, b).sum(axis=1)
    return BlockSet(block_size=b, sums=sums, n_observations=n)


def _gap_covariances(sums: np.ndarray, gaps: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Across-seed Cov(Y_k, Y_{k+m}) averaged over k, with standard errors over seeds."""
    n_seeds = sums.shape[0]
    centered = sums - sums.mean(axis=0)
    covariances = np.empty(len(gaps))
    errors = np.empty(len(gaps))
    for index, gap in enumerate(gaps):
        per_seed = (centered[:, :-gap] * centered[:, gap:]).mean(axis=1)
        covariances[index] = math.fsum(per_seed) / (n_seeds - 1)
        errors[index] = per_seed.std(ddof=1) / np.sqrt(n_seeds)
    return covariances, errors


def block_covariance_check(
    blocksets: Sequence[BlockSet],
    beta_nominal: float,
    max_gap: Optional[int] = None,
    split: float = 0.5,
) -> BlockCovarianceReport:
    """|Cov(Y_k, Y_j)| per gap with the envelope C b^2 m^-beta calibrated on one seed half."""
    n_seeds = len(blocksets)
    if n_seeds < MIN_BLOCK_SEEDS:
        raise InsufficientSeeds(MIN_BLOCK_SEEDS, n_seeds, "block covariance check")
    b = blocksets[0].block_size
    n_blocks = min(bs.n_blocks for bs in blocksets)
    if any(bs.block_size != b for bs in blocksets):
        raise DimensionMismatch("block sets use different block sizes")
    if n_blocks < 2:
        raise TrajectoryTooShort("need at least two blocks per seed")
    sums = np.stack([bs.sums[:n_blocks] for bs in blocksets])
    last_gap = n_blocks - 1 if max_gap is None else min(max_gap, n_blocks - 1)
    gaps = np.arange(1, last_gap + 1)

    covariances, errors = _gap_covariances(sums, gaps)
    magnitude = np.abs(covariances)
    fit = None
    positive = magnitude > 0
    try:
        fit = fit_power_law(gaps[positive], magnitude[positive])
    except (WindowTooSmall, NonPositiveValue) as e:
        logger.debug(f"Block covariance not fitted: {e}")

    cut = int(round(split * n_seeds))
    cov_a, _ = _gap_covariances(sums[:cut], gaps)
    cov_b, err_b = _gap_covariances(sums[cut:], gaps)
    shape = b ** 2 * gaps.astype(float) ** (-beta_nominal)
    c_blocks = float(np.max(np.abs(cov_a) / shape))
    envelope = c_blocks * shape
    domination = bool(np.all(np.abs(cov_b) <= envelope + Z_LIMIT * err_b))
    return BlockCovarianceReport(
        block_size=b,
        gaps=gaps,
        cov_abs=magnitude,
        stderr=errors,
        fit=fit,
        beta_nominal=beta_nominal,
        c_blocks=c_blocks,
        domination=domination,
        slack_min=float(np.min(envelope - np.abs(cov_b))),
    )


def _inverse_cdf(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse CDF, never landing on a zero-weight state."""
    index = (np.cumsum(weights, axis=1) <= u[:, None]).sum(axis=1)
    positive = weights > 0
    last_positive = weights.shape[1] - 1 - np.argmax(positive[:, ::-1], axis=1)
    return np.minimum(index, last_positive)


def couple_many(
    kernel: TransitionKernel, x0: int, y0: int, T: int, seeds: Sequence[int]
) -> Tuple[np.ndarray, List[Optional[int]]]:
    """Maximal one-step coupling from a single uniform per step, one row per seed.

    With u < w = sum_s min(P(x,s), P(y,s)) both chains move to the overlap's
    inverse CDF at u; otherwise each moves by its own residual at u - w.
    Returns apart[i, t] = 1{x_t != y_t} for t = 0..T and the meeting times.
    """
    n = kernel.n_states
    for state in (x0, y0):
        if not 0 <= state < n:
            raise InvalidParameter(f"state {state} outside 0..{n - 1}")
    if T < 1:
        raise InvalidParameter(f"T must be >= 1, got {T}")
    draws = np.stack([generator(seed).random(T) for seed in seeds])
    P = kernel.P
    x = np.full(len(seeds), x0, dtype=np.int64)
    y = np.full(len(seeds), y0, dtype=np.int64)
    apart = np.zeros((len(seeds), T + 1), dtype=bool)
    apart[:, 0] = x != y

    for t in range(T):
        u = draws[:, t]
        split = x != y
        together = ~split
        if np.any(together):
            x[together] = _inverse_cdf(P[x[together]], u[together])
            y[together] = x[together]
        if np.any(split):
            rows_x, rows_y, us = P[x[split]], P[y[split]], u[split]
            overlap = np.minimum(rows_x, rows_y)
            mass = overlap.sum(axis=1)
            meet = us < mass
            nx = np.empty(len(us), dtype=np.int64)
            ny = np.empty(len(us), dtype=np.int64)
            if np.any(meet):
                nx[meet] = _inverse_cdf(overlap[meet], us[meet])
                ny[meet] = nx[meet]
            miss = ~meet
            if np.any(miss):
                residual_u = us[miss] - mass[miss]
                nx[miss] = _inverse_cdf(rows_x[miss] - overlap[miss], residual_u)
                ny[miss] = _inverse_cdf(rows_y[miss] - overlap[miss], residual_u)
            x[split], y[split] = nx, ny
        apart[:, t + 1] = x != y

    taus: List[Optional[int]] = []
    for row in apart:
        met = np.flatnonzero(~row)
        taus.append(int(met[0]) if met.size else None)
    return apart, taus


def couple(kernel: TransitionKernel, x0: int, y0: int, T: int, seed: int) -> CouplingPath:
    apart, taus = couple_many(kernel, x0, y0, T, [seed])
    return CouplingPath(apart=apart[0], tau=taus[0])


def _two_start_tv(kernel: TransitionKernel, x0: int, y0: int, ts: np.ndarray) -> np.ndarray:
    """Exact 0.5 ||e_x P^t - e_y P^t||_1."""
    dx = np.zeros(kernel.n_states)
    dy = np.zeros(kernel.n_states)
    dx[x0] = 1.0
    dy[y0] = 1.0
    out = np.empty(len(ts))
    step = 0
    for index in np.argsort(ts, kind="stable"):
        while step < ts[index]:
            dx, dy = dx @ kernel.P, dy @ kernel.P
            step += 1
        out[index] = 0.5 * np.abs(dx - dy).sum()
    return out


def coupling_study(
    kernel: TransitionKernel,
    x0: int,
    y0: int,
    T: int,
    seeds: Sequence[int],
    ts: Optional[Sequence[int]] = None,
    window: Optional[Window] = None,
    split: float = 0.5,
) -> CouplingReport:
    """Monte-Carlo P(x_t != y_t) against the exact coupling lower bound and a held-out envelope."""
    apart, _ = couple_many(kernel, x0, y0, T, seeds)
    ts = lag_grid(1, T) if ts is None else np.asarray(ts, dtype=np.int64)
    n = len(seeds)
    p_apart = apart[:, ts].mean(axis=0)
    lower = _two_start_tv(kernel, x0, y0, ts)
    tv_x = tv_curve(kernel, x0, ts)
    tv_y = tv_curve(kernel, y0, ts)
    # Under the hypothesised bound the binomial spread is at least that of `lower`.
    spread = np.sqrt(np.maximum(p_apart * (1 - p_apart), lower * (1 - lower)) / n)
    dominates = bool(np.all(p_apart + Z_LIMIT * spread >= lower - NUMERICAL_FLOOR))

    fit = None
    envelope_c = 0.0
    envelope_domination = False
    cut = int(round(split * n))
    p_a = apart[:cut, :][:, ts].mean(axis=0)
    p_b = apart[cut:, :][:, ts].mean(axis=0)
    mask = np.ones(len(ts), dtype=bool)
    if window is not None:
        if window[0] is not None:
            mask &= ts >= window[0]
        if window[1] is not None:
            mask &= ts <= window[1]
    try:
        fit = fit_power_law(ts[mask & (p_apart > 0)], p_apart[mask & (p_apart > 0)])
        fit_a = fit_power_law(ts[mask & (p_a > 0)], p_a[mask & (p_a > 0)])
        shape = ts[mask].astype(float) ** (-fit_a.exponent)
        envelope_c = float(np.max(p_a[mask] / shape))
        se_b = np.sqrt(np.maximum(p_b[mask] * (1 - p_b[mask]), 1.0 / (n - cut)) / (n - cut))
        envelope_domination = bool(np.all(p_b[mask] <= envelope_c * shape + Z_LIMIT * se_b))
    except (WindowTooSmall, NonPositiveValue) as e:
        logger.debug(f"Coupling envelope not fitted: {e}")

    return CouplingReport(
        ts=ts,
        p_apart=p_apart,
        stderr=np.sqrt(p_apart * (1 - p_apart) / n),
        lower_bound=lower,
        tv_gap=np.abs(tv_x - tv_y),
        dominates_lower_bound=dominates,
        fit=fit,
        envelope_c=envelope_c,
        envelope_domination=envelope_domination,
    )


def concentration_block_size(n: int, beta_hat: float) -> int:
    """b = round(n^(1 / (beta + 1))), at least 1."""
    return max(1, int(round(n ** (1.0 / (beta_hat + 1.0)))))


def _sample_means(
    kernel: TransitionKernel, f: np.ndarray, n: int, seeds: Sequence[int], start: Start
) -> Tuple[np.ndarray, np.ndarray]:
    paths = sample_trajectories(kernel, start, n, seeds)[:, 1:]
    observed = f[paths]
    return observed.mean(axis=1), observed


def concentration_tail(
    kernel: TransitionKernel,
    functional: Functional,
    n: int,
    epsilons: Sequence[float],
    seeds: Sequence[int],
    beta_hat: float,
    start: Start = "stationary",
    split: float = 0.5,
) -> ConcentrationReport:
    """Held-out P(|mean_n f - pi f| > eps) against 2 exp(-n eps^2 / (2 C_beta)).

    C_beta is calibrated on the first seed batch as the larger of the blocked
    long-run variance and the smallest constant whose bound covers that batch.
    """
    if len(seeds) < MIN_TAIL_SEEDS:
        raise InsufficientSeeds(MIN_TAIL_SEEDS, len(seeds), "concentration tail")
    if n < 2:
        raise InvalidParameter(f"sample size must be >= 2, got {n}")
    f = _state_vector(functional, kernel.n_states)
    target = float(stationary_distribution(kernel) @ f)
    epsilons = np.asarray(epsilons, dtype=float)

    cut = int(round(split * len(seeds)))
    means_a, observed_a = _sample_means(kernel, f, n, seeds[:cut], start)
    means_b, _ = _sample_means(kernel, f, n, seeds[cut:], start)

    b = concentration_block_size(n, beta_hat)
    n_blocks = n // b
    blocks = observed_a[:, : n_blocks * b].reshape(len(means_a), n_blocks, b).sum(axis=2)
    long_run = float(np.mean(blocks.var(axis=1, ddof=1) / b)) if n_blocks > 1 else 0.0

    exceed_a = np.array([np.mean(np.abs(means_a - target) > eps) for eps in epsilons])
    needed = [
        n * eps ** 2 / (2.0 * math.log(2.0 / p)) for eps, p in zip(epsilons, exceed_a) if p > 0
    ]
    c_beta = max([long_run, *needed, NUMERICAL_FLOOR])

    n_b = len(means_b)
    rows = []
    dominates = True
    for eps in epsilons:
        empirical = float(np.mean(np.abs(means_b - target) > eps))
        se = math.sqrt(max(empirical * (1 - empirical), 1.0 / n_b) / n_b)
        bound = min(1.0, 2.0 * math.exp(-n * eps ** 2 / (2.0 * c_beta)))
        dominates &= empirical <= bound + Z_LIMIT * se
        rows.append(
            ConcentrationRow(
                epsilon=float(eps),
                empirical=empirical,
                stderr=math.sqrt(empirical * (1 - empirical) / n_b),
                bound=bound,
            )
        )
    logger.info(f"Concentration n={n} b={b} C_beta={c_beta:.4g} dominates={dominates}")
    return ConcentrationReport(n=n, block_size=b, c_beta=c_beta, rows=rows, dominates=bool(dominates))
