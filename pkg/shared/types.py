"""Shared type definitions for tdmix."""

from __future__ import annotations

import hashlib
from datetime import datetime, timezone
from enum import Enum
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_validator,
    model_validator,
)
from scipy.sparse import csgraph, csr_matrix

from tdmix.errors import PeriodicChain, ReducibleChain

ROW_SUM_TOL = 1e-12
# power-iteration projections may land a hair above the budget
SPECTRAL_SLACK = 1e-6


def _to_float_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=float)


def _to_int_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=np.int64)


def _to_bool_array(value: Any) -> np.ndarray:
    return np.array(value, dtype=bool)


def _to_list(value: np.ndarray) -> list:
    return value.tolist()


def communicating_classes(P: np.ndarray) -> Tuple[int, int]:
    """Return (number of communicating classes, number of closed classes)."""
    graph = csr_matrix(P > 0)
    n_classes, labels = csgraph.connected_components(graph, directed=True, connection="strong")
    closed = 0
    for label in range(n_classes):
        members = labels == label
        if P[np.ix_(members, ~members)].sum() == 0:
            closed += 1
    return n_classes, closed


def chain_period(P: np.ndarray) -> int:
    """Period of an irreducible chain: gcd of level offsets along every edge."""
    graph = csr_matrix(P > 0)
    depth = csgraph.shortest_path(graph, directed=True, unweighted=True, indices=0)
    rows, cols = np.nonzero(P > 0)
    offsets = (depth[rows] + 1 - depth[cols]).astype(np.int64)
    return int(np.gcd.reduce(np.abs(offsets)))


def check_ergodic_matrix(P: np.ndarray) -> None:
    """Raise ReducibleChain or PeriodicChain unless P is irreducible and aperiodic."""
    n_classes, closed = communicating_classes(P)
    if n_classes > 1:
        raise ReducibleChain(f"kernel has {n_classes} communicating classes ({closed} recurrent)")
    period = chain_period(P)
    if period != 1:
        raise PeriodicChain(f"kernel is periodic with period {period}")


FloatArray = Annotated[
    np.ndarray, BeforeValidator(_to_float_array), PlainSerializer(_to_list, return_type=list)
]
IntArray = Annotated[
    np.ndarray, BeforeValidator(_to_int_array), PlainSerializer(_to_list, return_type=list)
]
BoolArray = Annotated[
    np.ndarray, BeforeValidator(_to_bool_array), PlainSerializer(_to_list, return_type=list)
]


class KernelKind(str, Enum):
    """How a transition kernel was built."""

    MATRIX = "matrix"
    RENEWAL = "renewal"
    TWO_STATE = "two_state"
    IID = "iid"
    RANDOM = "random"
    LAZY = "lazy"


class EmbeddingKind(str, Enum):
    """State embedding used as ReLU network input."""

    ONE_HOT = "one_hot"
    COORDINATE = "coordinate"


class FixedPointMethod(str, Enum):
    """How a fixed point was obtained."""

    DIRECT_SOLVE = "direct-solve"
    LONG_RUN_AVERAGE = "long-run-average"


class MixingRegime(str, Enum):
    """Shape of a decay curve on its fit window."""

    POLYNOMIAL = "polynomial"
    GEOMETRIC = "geometric"
    DEGENERATE = "degenerate"


class BoundVariant(str, Enum):
    """Two-term envelope forms."""

    LINEAR_HP = "linear-hp"
    NONLINEAR_HP = "nonlinear-hp"
    RELU_DEEP = "relu-deep"
    MOMENT_P = "moment-p"
    GEOMETRIC = "geometric"
    GRONWALL = "gronwall"


class Verdict(str, Enum):
    """Outcome of one diagnostic."""

    PASS = "PASS"
    FAIL = "FAIL"
    NA = "NA"


class ArrayModel(BaseModel):
    """Immutable model that may hold numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# Chains
class TransitionKernel(ArrayModel):
    """Row-stochastic kernel over a finite state space with per-state rewards."""

    P: FloatArray
    rewards: FloatArray
    r_max: float = Field(gt=0)
    kind: KernelKind = KernelKind.MATRIX
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_kernel(self) -> "TransitionKernel":
        P = self.P
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] < 1:
            raise ValueError(f"P must be a non-empty square matrix, got shape {P.shape}")
        if self.rewards.shape != (P.shape[0],):
            raise ValueError("rewards must have one entry per state")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValueError("transition probabilities must be finite and nonnegative")
        row_error = np.max(np.abs(P.sum(axis=1) - 1.0))
        if row_error > ROW_SUM_TOL:
            raise ValueError(f"rows must sum to 1 (max deviation {row_error:.3e})")
        if np.any(np.abs(self.rewards) > self.r_max):
            raise ValueError("rewards must lie in [-r_max, r_max]")
        check_ergodic_matrix(P)
        return self

    @property
    def n_states(self) -> int:
        return int(self.P.shape[0])

    @property
    def kernel_id(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.P).tobytes())
        digest.update(np.ascontiguousarray(self.rewards).tobytes())
        return f"{self.kind.value}-{digest.hexdigest()[:12]}"


class Trajectory(ArrayModel):
    """Sampled path; rewards[t] is received on the transition states[t] -> states[t+1]."""

    states: IntArray
    rewards: FloatArray
    seed: int
    kernel_id: str

    @model_validator(mode="after")
    def _check_lengths(self) -> "Trajectory":
        if len(self.rewards) != len(self.states) - 1:
            raise ValueError("len(rewards) must equal len(states) - 1")
        if len(self.states) and self.states.min() < 0:
            raise ValueError("state indices must be nonnegative")
        return self

    @property
    def length(self) -> int:
        return len(self.rewards)


class DriftCertificate(ArrayModel):
    """Candidate Lyapunov drift data E[V(x')|x] <= V(x) - lam*W(x) + b."""

    V: FloatArray
    W: FloatArray
    lam: float = Field(gt=0)
    b: float = Field(ge=0)
    holds: Optional[BoolArray] = None

    @field_validator("V")
    @classmethod
    def _v_at_least_one(cls, v: np.ndarray) -> np.ndarray:
        if np.any(v < 1):
            raise ValueError("Lyapunov values must be >= 1")
        return v

    @field_validator("W")
    @classmethod
    def _w_nonnegative(cls, w: np.ndarray) -> np.ndarray:
        if np.any(w < 0):
            raise ValueError("W must be nonnegative")
        return w

    @property
    def valid(self) -> bool:
        return self.holds is not None and bool(np.all(self.holds))


# Value models
class FeatureMap(ArrayModel):
    """Feature matrix with its norm bound and Hölder constants."""

    phi: FloatArray
    c_phi: float = 0.0
    c_gamma: float = 1.0
    holder_gamma: float = Field(default=1.0, gt=0, le=1)

    @model_validator(mode="before")
    @classmethod
    def _default_bound(cls, data: Any) -> Any:
        if isinstance(data, dict) and not data.get("c_phi"):
            phi = np.atleast_2d(np.array(data["phi"], dtype=float))
            data = {**data, "c_phi": float(np.max(np.linalg.norm(phi, axis=1)))}
        return data

    @model_validator(mode="after")
    def _check_bound(self) -> "FeatureMap":
        if self.phi.ndim != 2:
            raise ValueError("phi must be an n_states x d matrix")
        if np.max(np.linalg.norm(self.phi, axis=1)) > self.c_phi * (1 + 1e-12):
            raise ValueError("feature rows exceed c_phi")
        return self

    @property
    def n_states(self) -> int:
        return int(self.phi.shape[0])

    @property
    def dim(self) -> int:
        return int(self.phi.shape[1])


class LinearModel(ArrayModel):
    """f(s) = theta . phi(s)."""

    kind: Literal["linear"] = "linear"
    features: FeatureMap
    theta: FloatArray

    @model_validator(mode="after")
    def _check_dim(self) -> "LinearModel":
        if self.theta.shape != (self.features.dim,):
            raise ValueError(f"theta must have length {self.features.dim}")
        return self

    @property
    def n_states(self) -> int:
        return self.features.n_states


class ReluNetwork(ArrayModel):
    """Fully connected ReLU network; each weight matrix carries a trailing bias column.

    Hidden layers apply ReLU, the last layer is affine with a scalar output.
    """

    kind: Literal["relu"] = "relu"
    weights: List[FloatArray]
    budget: float = Field(ge=0)
    x_max: float = Field(gt=0)
    embedding: FloatArray
    embedding_kind: EmbeddingKind = EmbeddingKind.ONE_HOT

    @model_validator(mode="after")
    def _check_shapes(self) -> "ReluNetwork":
        if len(self.weights) < 1:
            raise ValueError("network needs at least one layer")
        fan_in = self.embedding.shape[1]
        for index, w in enumerate(self.weights):
            if w.ndim != 2 or w.shape[1] != fan_in + 1:
                raise ValueError(f"layer {index} expects {fan_in + 1} columns, got shape {w.shape}")
            fan_in = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("output layer must have a single unit")
        if np.max(np.linalg.norm(self.embedding, axis=1)) > self.x_max * (1 + 1e-12):
            raise ValueError("embedding rows exceed x_max")
        for index, w in enumerate(self.weights):
            sigma = float(np.linalg.norm(w, 2))
            if sigma > self.budget * (1 + SPECTRAL_SLACK):
                raise ValueError(f"layer {index} has spectral norm {sigma:.6g} above budget {self.budget}")
        return self

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def n_states(self) -> int:
        return int(self.embedding.shape[0])

    @property
    def hidden_widths(self) -> List[int]:
        return [w.shape[0] for w in self.weights[:-1]]


ValueModel = Annotated[Union[LinearModel, ReluNetwork], Field(discriminator="kind")]


class GradConstants(BaseModel):
    """Gradient, TD-gradient Lipschitz and Hölder constants of a ReLU network."""

    G: float
    G1: float
    L: float


# TD
class StepSchedule(BaseModel):
    """alpha_t = c_alpha * t^(-eta)."""

    model_config = ConfigDict(frozen=True)

    c_alpha: float = Field(gt=0)
    eta: float


class IterateHistory(ArrayModel):
    """Scalar series of one TD(0) run plus checkpointed parameters.

    Step k (0-based) uses the transition (states[k], rewards[k], next_states[k]);
    thetas[i] holds the parameters after checkpoints[i] updates.
    """

    model0: ValueModel
    schedule: StepSchedule
    discount: float
    seed: int
    kernel_id: str
    alphas: FloatArray
    deltas: FloatArray
    checkpoints: IntArray
    thetas: FloatArray
    states: Optional[IntArray] = None
    next_states: Optional[IntArray] = None
    rewards: Optional[FloatArray] = None

    @model_validator(mode="after")
    def _check_lengths(self) -> "IterateHistory":
        if len(self.deltas) != len(self.alphas):
            raise ValueError("alphas and deltas must have equal length")
        if len(self.checkpoints) != len(self.thetas):
            raise ValueError("one theta row per checkpoint")
        if self.states is not None:
            for name in ("states", "next_states", "rewards"):
                series = getattr(self, name)
                if series is None or len(series) != len(self.alphas):
                    raise ValueError(f"{name} must cover every update")
        return self

    @property
    def n_updates(self) -> int:
        return len(self.alphas)

    @property
    def model_kind(self) -> str:
        return self.model0.kind

    @property
    def full_stream(self) -> bool:
        return self.states is not None

    def theta_at(self, t: int) -> np.ndarray:
        index = int(np.searchsorted(self.checkpoints, t))
        if index >= len(self.checkpoints) or self.checkpoints[index] != t:
            raise KeyError(f"no checkpoint at t={t}")
        return self.thetas[index]


# Decomposition
class FixedPoint(ArrayModel):
    """Parameter vector solving the stationary TD condition."""

    theta_star: FloatArray
    residual: float
    method: FixedPointMethod


class Decomposition(ArrayModel):
    """Martingale/remainder split of theta_t - theta*.

    remainder holds the drift part, so e_t = (theta_0 - theta*) + M_t + remainder_t;
    remainder_total = e_t - M_t absorbs the initial error.
    """

    ts: IntArray
    errors: FloatArray
    martingale: FloatArray
    remainder: FloatArray
    increments: FloatArray
    step_states: IntArray
    theta0: FloatArray
    theta_star: FloatArray

    @property
    def remainder_total(self) -> np.ndarray:
        return self.errors - self.martingale

    @property
    def err_norm(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)

    @property
    def martingale_norm(self) -> np.ndarray:
        return np.linalg.norm(self.martingale, axis=1)

    @property
    def remainder_norm(self) -> np.ndarray:
        return np.linalg.norm(self.remainder_total, axis=1)


class SeriesCI(ArrayModel):
    """Per-checkpoint statistic across seeds with a bootstrap interval."""

    ts: IntArray
    value: FloatArray
    ci_low: FloatArray
    ci_high: FloatArray
    n_seeds: int


class JacobianEstimate(ArrayModel):
    """Finite-difference Jacobian of the negated mean update field."""

    H: FloatArray
    eigenvalues: FloatArray
    lambda_min: float
    positive_definite: bool


class BinTestReport(BaseModel):
    """Zero-mean test of martingale increments per (state, time-bin)."""

    n_bins: int
    pass_fraction: float
    max_abs_z: float
    passed: bool


class OrthogonalityReport(BaseModel):
    """Across-seed inner products of increments at distinct steps."""

    pairs: List[Tuple[int, int]]
    z_scores: List[float]
    passed: bool


class RemainderExponentReport(BaseModel):
    """Fitted decay of the remainder against the two candidate exponents."""

    fitted_exponent: float
    half_holder: float
    eta_holder: float
    closer: str


# Dependence
class PowerLawFit(BaseModel):
    """Least-squares fit of log y = log_intercept - exponent * log t."""

    exponent: float
    log_intercept: float
    r_squared: float
    window: Tuple[float, float]
    n_points: int
    stderr: float = 0.0


class BlockSet(ArrayModel):
    """Sums of a functional over consecutive, non-overlapping blocks."""

    block_size: int = Field(ge=1)
    sums: FloatArray
    n_observations: int

    @property
    def n_blocks(self) -> int:
        return len(self.sums)


class MixingEstimate(ArrayModel):
    """Decay values at increasing lags with a power-law fit on the window."""

    lags: IntArray
    values: FloatArray
    fit: Optional[PowerLawFit] = None
    window: Tuple[int, int]
    regime: MixingRegime
    geometric_rate: Optional[float] = None

    @model_validator(mode="after")
    def _check_lags(self) -> "MixingEstimate":
        if np.any(np.diff(self.lags) <= 0):
            raise ValueError("lags must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("decay values must be nonnegative")
        return self


class BlockCovarianceReport(ArrayModel):
    """Cross-block covariance per gap with a split-sample envelope check."""

    block_size: int
    gaps: IntArray
    cov_abs: FloatArray
    stderr: FloatArray
    fit: Optional[PowerLawFit] = None
    beta_nominal: float
    c_blocks: float
    domination: bool
    slack_min: float


class CouplingPath(ArrayModel):
    """Indicator of x_t != y_t for t = 0..T and the meeting time."""

    apart: BoolArray
    tau: Optional[int] = None


class CouplingReport(ArrayModel):
    """Monte-Carlo coupling probabilities against exact lower bounds."""

    ts: IntArray
    p_apart: FloatArray
    stderr: FloatArray
    lower_bound: FloatArray
    tv_gap: FloatArray
    dominates_lower_bound: bool
    fit: Optional[PowerLawFit] = None
    envelope_c: float
    envelope_domination: bool


class ConcentrationRow(BaseModel):
    """One epsilon of a tail table."""

    epsilon: float
    empirical: float
    stderr: float
    bound: float


class ConcentrationReport(BaseModel):
    """Held-out tail frequencies of a sample mean against a calibrated bound."""

    n: int
    block_size: int
    c_beta: float
    rows: List[ConcentrationRow]
    dominates: bool


# ReLU diagnostics
class ActivationPattern(ArrayModel):
    """On/off gates per hidden layer; a gate is on iff its pre-activation is > 0."""

    bits: List[BoolArray]

    @property
    def n_units(self) -> int:
        return sum(len(layer) for layer in self.bits)

    def flat(self) -> np.ndarray:
        if not self.bits:
            return np.zeros(0, dtype=bool)
        return np.concatenate(self.bits)


class CrossingRecord(ArrayModel):
    """Per-step activation flips over a landmark set."""

    t: IntArray
    kappa_hat: IntArray
    displacement: FloatArray
    alpha: FloatArray
    gamma_min_proxy: FloatArray
    bound: IntArray
    cum_kappa: IntArray
    n_landmarks: int
    n_units: int


# Rates
class BoundSpec(BaseModel):
    """Envelope form with fitted constants and configured exponents."""

    variant: BoundVariant
    c: float = Field(default=1.0, ge=0)
    c_prime: float = Field(default=1.0, ge=0)
    beta: float = Field(gt=0)
    eta: float = Field(gt=0)
    holder_gamma: float = Field(default=1.0, gt=0)
    p: int = Field(default=2, gt=0)
    delta: float = Field(default=0.1, gt=0, lt=1)
    lambda_min: Optional[float] = Field(default=None, gt=0)
    lipschitz: Optional[float] = Field(default=None, ge=0)
    initial_error: Optional[float] = Field(default=None, ge=0)


class QuantileEnvelope(ArrayModel):
    """Per-checkpoint (1 - delta)-quantile of the error with a binomial interval."""

    ts: IntArray
    quantile: FloatArray
    ci_low: FloatArray
    ci_high: FloatArray
    delta: float
    n_seeds: int


class BoundReport(BaseModel):
    """Split-sample envelope verification."""

    variant: BoundVariant
    fitted: Dict[str, float]
    quantile_exponent: Optional[float] = None
    predicted_exponent: float
    exponent_gap: Optional[float] = None
    domination: bool
    domination_batch_a: bool
    slack_min: float
    variant_gaps: Dict[str, float] = Field(default_factory=dict)
    closest_variant: Optional[str] = None


# Study
class DiagnosticLine(BaseModel):
    """One PASS/FAIL/NA line of a study report."""

    name: str
    verdict: Verdict
    detail: str = ""


class StudyReport(BaseModel):
    """Aggregate verdicts of a study."""

    lines: List[DiagnosticLine]

    @property
    def failed(self) -> bool:
        return any(line.verdict == Verdict.FAIL for line in self.lines)


class Manifest(BaseModel):
    """Reproducibility manifest of an artifact directory."""

    config_hash: str
    version: str
    files: Dict[str, str]


# Response Models
class MCPResponse(BaseModel):
    """Base MCP response."""

    success: bool
    data: Optional[Any] = None
    error: Optional[str] = None
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
