"""Last-iterate TD(0) with polynomially decaying step sizes."""

import logging
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from shared.types import IterateHistory, LinearModel, ReluNetwork, StepSchedule, TransitionKernel
from tdmix.approx import ValueModel, grad, parameters, project_spectral, value, with_parameters
from tdmix.chain import Start, sample_trajectory
from tdmix.errors import InvalidParameter, NonFiniteUpdate

logger = logging.getLogger(__name__)

GRID_RATIO = 1.2

# Called after every update with (t, model before, model after, alpha).
StepCallback = Callable[[int, ValueModel, ValueModel, float], None]


def check_schedule(schedule: StepSchedule) -> None:
    if not 0.5 < schedule.eta <= 1.0:
        raise InvalidParameter(f"eta must lie in (0.5, 1], got {schedule.eta}")


def check_discount(discount: float) -> None:
    if not 0.0 <= discount < 1.0:
        raise InvalidParameter(f"discount must lie in [0, 1), got {discount}")


def step_size(schedule: StepSchedule, t: int) -> float:
    """alpha_t = c_alpha * t^(-eta), t >= 1."""
    check_schedule(schedule)
    if t < 1:
        raise InvalidParameter(f"step index must be >= 1, got {t}")
    return schedule.c_alpha * float(t) ** (-schedule.eta)


def step_sizes(schedule: StepSchedule, T: int) -> np.ndarray:
    """alpha_1 .. alpha_T."""
    check_schedule(schedule)
    return schedule.c_alpha * np.arange(1, T + 1, dtype=float) ** (-schedule.eta)


def partial_step_sums(schedule: StepSchedule, ts: Sequence[int]) -> np.ndarray:
    """Sum of alpha_k for k <= t at each t."""
    ts = np.asarray(ts, dtype=np.int64)
    if ts.size == 0:
        return np.zeros(0)
    if ts.min() < 0:
        raise InvalidParameter("step counts must be nonnegative")
    cumulative = np.concatenate([[0.0], np.cumsum(step_sizes(schedule, int(ts.max())))])
    return cumulative[ts]


def checkpoint_grid(T: int, every: Optional[int] = None) -> np.ndarray:
    """Checkpoint steps: 0, T and either every `every` steps or rounded powers of 1.2 and of 2."""
    if every:
        grid = set(range(0, T + 1, every))
    else:
        grid = set()
        power = 1.0
        while power <= T:
            grid.add(int(round(power)))
            power *= GRID_RATIO
        dyadic = 1
        while dyadic <= T:
            grid.add(dyadic)
            dyadic *= 2
    grid.update({0, T})
    return np.array(sorted(t for t in grid if 0 <= t <= T), dtype=np.int64)


def td_error(model: ValueModel, s: int, r: float, s_next: int, discount: float) -> float:
    """delta = r + discount * f(s') - f(s)."""
    return r + discount * value(model, s_next) - value(model, s)


def td_step(
    model: ValueModel,
    transition: Tuple[int, float, int],
    alpha: float,
    discount: float,
) -> ValueModel:
    """theta' = theta + alpha * delta * grad f(s); ReLU layers are projected back onto the budget."""
    if alpha < 0:
        raise InvalidParameter(f"step size must be nonnegative, got {alpha}")
    s, r, s_next = transition
    delta = td_error(model, s, r, s_next, discount)
    g = grad(model, s)
    if not np.isfinite(delta) or not np.all(np.isfinite(g)):
        raise NonFiniteUpdate(f"non-finite TD error {delta} or gradient at state {s}")
    updated = with_parameters(model, parameters(model) + alpha * delta * g)
    if isinstance(updated, ReluNetwork):
        updated = project_spectral(updated)
    return updated


def _run_linear(
    model0: LinearModel,
    states: np.ndarray,
    rewards: np.ndarray,
    alphas: np.ndarray,
    discount: float,
    checkpoints: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    phi = model0.features.phi
    theta = model0.theta.copy()
    deltas = np.empty(len(alphas))
    thetas = np.empty((len(checkpoints), theta.shape[0]))
    marker = 0
    if checkpoints[0] == 0:
        thetas[0] = theta
        marker = 1
    for k in range(len(alphas)):
        s = states[k]
        features = phi[s]
        delta = rewards[k] + discount * (phi[states[k + 1]] @ theta) - features @ theta
        if not np.isfinite(delta):
            raise NonFiniteUpdate(f"non-finite TD error {delta} at state {s}", step=k + 1)
        deltas[k] = delta
        theta += (alphas[k] * delta) * features
        if marker < len(checkpoints) and checkpoints[marker] == k + 1:
            thetas[marker] = theta
            marker += 1
    return deltas, thetas


def _run_generic(
    model0: ValueModel,
    states: np.ndarray,
    rewards: np.ndarray,
    alphas: np.ndarray,
    discount: float,
    checkpoints: np.ndarray,
    callback: Optional[StepCallback],
) -> Tuple[np.ndarray, np.ndarray]:
    model = model0
    deltas = np.empty(len(alphas))
    thetas = np.empty((len(checkpoints), len(parameters(model0))))
    marker = 0
    if checkpoints[0] == 0:
        thetas[0] = parameters(model)
        marker = 1
    for k in range(len(alphas)):
        s, s_next = int(states[k]), int(states[k + 1])
        deltas[k] = td_error(model, s, rewards[k], s_next, discount)
        try:
            updated = td_step(model, (s, rewards[k], s_next), alphas[k], discount)
        except NonFiniteUpdate as e:
            raise NonFiniteUpdate(str(e), step=k + 1) from e
        if callback is not None:
            callback(k + 1, model, updated, float(alphas[k]))
        model = updated
        if marker < len(checkpoints) and checkpoints[marker] == k + 1:
            thetas[marker] = parameters(model)
            marker += 1
    return deltas, thetas


def run_td(
    kernel: TransitionKernel,
    model0: ValueModel,
    schedule: StepSchedule,
    discount: float,
    T: int,
    seed: int,
    checkpoint_every: Optional[int] = None,
    start: Start = 0,
    record_stream: bool = True,
    frozen: bool = False,
    callback: Optional[StepCallback] = None,
) -> IterateHistory:
    """Run TD(0) over every transition of one sampled trajectory of length T.

    With `frozen` the step sizes are recorded as 0 and the parameters never move.
    """
    if T < 1:
        raise InvalidParameter(f"T must be >= 1, got {T}")
    check_schedule(schedule)
    check_discount(discount)

    trajectory = sample_trajectory(kernel, start, T, seed)
    states = trajectory.states
    rewards = trajectory.rewards
    alphas = np.zeros(T) if frozen else step_sizes(schedule, T)
    checkpoints = checkpoint_grid(T, checkpoint_every)

    logger.info(f"Running TD(0): model={model0.kind} T={T} seed={seed} kernel={kernel.kernel_id}")
    if isinstance(model0, LinearModel) and callback is None:
        deltas, thetas = _run_linear(model0, states, rewards, alphas, discount, checkpoints)
    else:
        deltas, thetas = _run_generic(model0, states, rewards, alphas, discount, checkpoints, callback)
    logger.info(f"Finished TD(0) seed={seed}: |delta_T|={abs(deltas[-1]):.4g}")

    stream = {}
    if record_stream:
        stream = {"states": states[:-1], "next_states": states[1:], "rewards": rewards}
    return IterateHistory(
        model0=model0,
        schedule=schedule,
        discount=discount,
        seed=seed,
        kernel_id=kernel.kernel_id,
        alphas=alphas,
        deltas=deltas,
        checkpoints=checkpoints,
        thetas=thetas,
        **stream,
    )


def final_model(history: IterateHistory) -> ValueModel:
    return with_parameters(history.model0, history.thetas[-1])


def error_matrix(
    histories: Sequence[IterateHistory], theta_star: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Checkpoints and ||theta_t - theta*|| per history (rows in the given order)."""
    if not histories:
        raise InvalidParameter("no histories given")
    ts = histories[0].checkpoints
    for history in histories[1:]:
        if not np.array_equal(history.checkpoints, ts):
            raise InvalidParameter("histories have different checkpoint grids")
    errors = np.stack([np.linalg.norm(h.thetas - theta_star, axis=1) for h in histories])
    return ts, errors
