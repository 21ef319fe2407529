"""Finite Markov reward processes and exact ergodicity quantities."""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg, special

from shared.types import (
    DriftCertificate,
    KernelKind,
    TransitionKernel,
    Trajectory,
    check_ergodic_matrix,
)
from tdmix.errors import DimensionMismatch, InvalidParameter
from tdmix.seeding import generator

logger = logging.getLogger(__name__)

STATIONARY_TOL = 1e-10
DRIFT_TOL = 1e-12
POWER_ITERATION_MAX = 200_000

Start = Union[int, str]


def check_ergodic(kernel: TransitionKernel) -> None:
    """Raise unless the kernel is irreducible and aperiodic (TransitionKernel runs this on construction)."""
    check_ergodic_matrix(kernel.P)


def make_kernel(
    P: Sequence[Sequence[float]],
    rewards: Sequence[float],
    r_max: Optional[float] = None,
    kind: KernelKind = KernelKind.MATRIX,
    params: Optional[dict] = None,
) -> TransitionKernel:
    """Build a validated, irreducible and aperiodic kernel."""
    rewards = np.asarray(rewards, dtype=float)
    if r_max is None:
        r_max = float(np.max(np.abs(rewards))) if rewards.size else 0.0
        r_max = r_max or 1.0
    return TransitionKernel(P=P, rewards=rewards, r_max=r_max, kind=kind, params=params or {})


def make_two_state(p: float, q: float, rewards: Sequence[float] = (1.0, 0.0)) -> TransitionKernel:
    """Two-state chain leaving state 0 with probability p and state 1 with probability q."""
    P = np.array([[1.0 - p, p], [q, 1.0 - q]])
    return make_kernel(P, rewards, kind=KernelKind.TWO_STATE, params={"p": p, "q": q})


def make_iid_chain(distribution: Sequence[float], rewards: Sequence[float]) -> TransitionKernel:
    """Chain whose rows all equal `distribution`, i.e. i.i.d. states."""
    row = np.asarray(distribution, dtype=float)
    row = row / row.sum()
    P = np.tile(row, (len(row), 1))
    return make_kernel(P, rewards, kind=KernelKind.IID)


def make_random_kernel(
    n_states: int, seed: int, rewards: Optional[Sequence[float]] = None
) -> TransitionKernel:
    """Dense kernel with Dirichlet(1) rows; rewards uniform on [-1, 1] unless given."""
    rng = generator(seed)
    P = rng.dirichlet(np.ones(n_states), size=n_states)
    P = P / P.sum(axis=1, keepdims=True)
    if rewards is None:
        rewards = rng.uniform(-1.0, 1.0, size=n_states)
    return make_kernel(P, rewards, r_max=1.0, kind=KernelKind.RANDOM, params={"seed": seed})


def make_lazy(kernel: TransitionKernel, holding: float = 0.5) -> TransitionKernel:
    """holding * I + (1 - holding) * P."""
    if not 0.0 <= holding < 1.0:
        raise InvalidParameter(f"holding must be in [0, 1), got {holding}")
    P = holding * np.eye(kernel.n_states) + (1.0 - holding) * kernel.P
    return make_kernel(
        P,
        kernel.rewards,
        r_max=kernel.r_max,
        kind=KernelKind.LAZY,
        params={**kernel.params, "holding": holding, "base": kernel.kind.value},
    )


def _default_renewal_reward(state: int) -> float:
    return 1.0 if state == 0 else 0.0


def make_renewal_chain(
    kappa: float,
    n_states: int,
    reward_fn: Optional[Callable[[int], float]] = None,
) -> TransitionKernel:
    """Truncated discrete renewal ("house of cards") chain.

    From state 0 the chain jumps to j with probability proportional to
    (j+1)^-(kappa+1), the mass beyond the truncation folded into the last state;
    from j > 0 it moves to j - 1. Return times to 0 have tail ~ j^-kappa.
    """
    if n_states < 3:
        raise InvalidParameter(f"renewal chain needs n_states >= 3, got {n_states}")
    if kappa <= 1:
        raise InvalidParameter(f"kappa must exceed 1, got {kappa}")

    exponent = kappa + 1.0
    norm = special.zeta(exponent)
    jump = np.arange(1, n_states + 1, dtype=float) ** (-exponent) / norm
    # Hurwitz zeta gives the tail sum over j >= n_states - 1 without cancellation.
    jump[-1] = special.zeta(exponent, n_states) / norm
    jump = jump / jump.sum()

    P = np.zeros((n_states, n_states))
    P[0] = jump
    P[np.arange(1, n_states), np.arange(0, n_states - 1)] = 1.0

    reward_fn = reward_fn or _default_renewal_reward
    rewards = np.array([reward_fn(state) for state in range(n_states)], dtype=float)
    logger.debug(f"Renewal chain kappa={kappa} n_states={n_states} tail mass={jump[-1]:.3e}")
    return make_kernel(
        P,
        rewards,
        kind=KernelKind.RENEWAL,
        params={"kappa": kappa, "n_states": n_states},
    )


def _power_iteration(P: np.ndarray) -> np.ndarray:
    lazy = 0.5 * (P + np.eye(P.shape[0]))
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(POWER_ITERATION_MAX):
        nxt = pi @ lazy
        if np.max(np.abs(nxt - pi)) < STATIONARY_TOL * 1e-2:
            return nxt
        pi = nxt
    return pi


def stationary_distribution(kernel: TransitionKernel) -> np.ndarray:
    """Unique stationary law by dense solve, falling back to power iteration."""
    n = kernel.n_states
    system = kernel.P.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        pi = linalg.solve(system, rhs)
    except linalg.LinAlgError:
        pi = None

    if pi is None or np.max(np.abs(pi @ kernel.P - pi)) > STATIONARY_TOL:
        logger.debug("Direct stationary solve inaccurate; using power iteration")
        pi = _power_iteration(kernel.P)

    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def tv_curve(kernel: TransitionKernel, start: int, ts: Sequence[int]) -> np.ndarray:
    """Exact TV distance between e_start P^t and pi at every t in `ts`."""
    ts = np.asarray(ts, dtype=np.int64)
    if ts.size and ts.min() < 0:
        raise InvalidParameter("step counts must be nonnegative")
    pi = stationary_distribution(kernel)
    dist = np.zeros(kernel.n_states)
    dist[start] = 1.0
    out = np.empty(len(ts))
    order = np.argsort(ts, kind="stable")
    step = 0
    for index in order:
        while step < ts[index]:
            dist = dist @ kernel.P
            step += 1
        out[index] = 0.5 * np.abs(dist - pi).sum()
    return out


def tv_to_stationary(kernel: TransitionKernel, start: int, t: int) -> float:
    """Exact 0.5 * ||e_start P^t - pi||_1."""
    return float(tv_curve(kernel, start, [t])[0])


def _initial_state(kernel: TransitionKernel, start: Start, rng: np.random.Generator) -> int:
    if start == "stationary":
        pi = stationary_distribution(kernel)
        cdf = np.cumsum(pi)
        return min(int(np.searchsorted(cdf, rng.random(), side="right")), kernel.n_states - 1)
    state = int(start)
    if not 0 <= state < kernel.n_states:
        raise InvalidParameter(f"start state {state} outside 0..{kernel.n_states - 1}")
    return state


def sample_trajectory(
    kernel: TransitionKernel, start: Start, length: int, seed: int
) -> Trajectory:
    """Sample `length` transitions by inverse CDF over rows of P."""
    if length < 1:
        raise InvalidParameter(f"length must be >= 1, got {length}")
    rng = generator(seed)
    state = _initial_state(kernel, start, rng)
    draws = rng.random(length)
    cdf = np.cumsum(kernel.P, axis=1)
    last = kernel.n_states - 1

    states = np.empty(length + 1, dtype=np.int64)
    states[0] = state
    for t in range(length):
        state = min(int(np.searchsorted(cdf[state], draws[t], side="right")), last)
        states[t + 1] = state

    return Trajectory(
        states=states,
        rewards=kernel.rewards[states[:-1]],
        seed=seed,
        kernel_id=kernel.kernel_id,
    )


def sample_trajectories(
    kernel: TransitionKernel, start: Start, length: int, seeds: Sequence[int]
) -> np.ndarray:
    """State paths for many seeds at once, shape (n_seeds, length + 1).

    Row i equals sample_trajectory(kernel, start, length, seeds[i]).states.
    """
    if length < 1:
        raise InvalidParameter(f"length must be >= 1, got {length}")
    n_seeds = len(seeds)
    states = np.empty((n_seeds, length + 1), dtype=np.int64)
    draws = np.empty((n_seeds, length))
    for row, seed in enumerate(seeds):
        rng = generator(seed)
        states[row, 0] = _initial_state(kernel, start, rng)
        draws[row] = rng.random(length)

    cdf = np.cumsum(kernel.P, axis=1)
    last = kernel.n_states - 1
    for t in range(length):
        rows = cdf[states[:, t]]
        nxt = (rows <= draws[:, t : t + 1]).sum(axis=1)
        states[:, t + 1] = np.minimum(nxt, last)
    return states


def check_drift(kernel: TransitionKernel, cert: DriftCertificate) -> DriftCertificate:
    """Evaluate (PV)[i] <= V[i] - lam*W[i] + b at every state."""
    n = kernel.n_states
    if cert.V.shape != (n,) or cert.W.shape != (n,):
        raise DimensionMismatch(
            f"V and W need length {n}, got {cert.V.shape[0]} and {cert.W.shape[0]}"
        )
    expected = kernel.P @ cert.V
    holds = expected <= cert.V - cert.lam * cert.W + cert.b + DRIFT_TOL
    return cert.model_copy(update={"holds": holds})


def scan_drift(
    kernel: TransitionKernel,
    V: Sequence[float],
    W: Sequence[float],
    lambdas: Sequence[float],
) -> List[DriftCertificate]:
    """For each lambda, the certificate with the smallest slack b that holds everywhere."""
    V = np.asarray(V, dtype=float)
    W = np.asarray(W, dtype=float)
    if V.shape != (kernel.n_states,) or W.shape != (kernel.n_states,):
        raise DimensionMismatch("V and W need one entry per state")
    expected = kernel.P @ V
    certificates = []
    for lam in lambdas:
        b = max(0.0, float(np.max(expected - V + lam * W)))
        cert = DriftCertificate(V=V, W=W, lam=lam, b=b)
        certificates.append(check_drift(kernel, cert))
    return certificates
