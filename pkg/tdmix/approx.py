"""Value-function models: linear features and spectrally bounded ReLU networks."""

import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from shared.types import (
    EmbeddingKind,
    FeatureMap,
    GradConstants,
    LinearModel,
    ReluNetwork,
)
from tdmix.errors import DimensionMismatch, InvalidParameter
from tdmix.seeding import generator

logger = logging.getLogger(__name__)

ValueModel = Union[LinearModel, ReluNetwork]

POWER_ITERATIONS = 50
POWER_TOL = 1e-10


# Features
def tabular_features(n_states: int) -> FeatureMap:
    return FeatureMap(phi=np.eye(n_states))


def random_features(n_states: int, dim: int, seed: int, c_phi: float = 1.0) -> FeatureMap:
    """Gaussian features rescaled so the largest row norm equals c_phi."""
    phi = generator(seed).normal(size=(n_states, dim))
    phi *= c_phi / np.max(np.linalg.norm(phi, axis=1))
    return FeatureMap(phi=phi, c_phi=c_phi)


def make_linear_model(features: FeatureMap, theta: Optional[Sequence[float]] = None) -> LinearModel:
    if theta is None:
        theta = np.zeros(features.dim)
    return LinearModel(features=features, theta=theta)


# ReLU networks
def embed_states(n_states: int, kind: EmbeddingKind, x_max: float) -> np.ndarray:
    """Input vectors for each state with norm at most x_max."""
    if kind == EmbeddingKind.ONE_HOT:
        return x_max * np.eye(n_states)
    if kind == EmbeddingKind.COORDINATE:
        return x_max * (np.arange(n_states, dtype=float) / max(n_states - 1, 1))[:, None]
    raise InvalidParameter(f"unknown embedding kind: {kind}")


def spectral_norm(w: np.ndarray) -> float:
    """Largest singular value by power iteration, exact SVD if it fails to settle."""
    if not np.any(w):
        return 0.0
    v = generator(0).normal(size=w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(POWER_ITERATIONS):
        u = w @ v
        estimate = float(np.linalg.norm(u))
        back = w.T @ u
        norm = np.linalg.norm(back)
        if estimate == 0.0 or norm == 0.0:
            break
        v = back / norm
        if abs(estimate - sigma) <= POWER_TOL * estimate:
            return max(estimate, float(np.linalg.norm(w @ v)))
        sigma = estimate
    return float(np.linalg.norm(w, 2))


def _project_layers(weights: Sequence[np.ndarray], budget: float) -> Tuple[List[np.ndarray], bool]:
    projected = []
    changed = False
    for w in weights:
        if np.linalg.norm(w) > budget:
            sigma = spectral_norm(w)
            if sigma > budget:
                w = w * (budget / sigma)
                changed = True
        projected.append(w)
    return projected, changed


def project_spectral(net: ReluNetwork) -> ReluNetwork:
    """Rescale every layer whose spectral norm exceeds the budget down to it."""
    projected, changed = _project_layers(net.weights, net.budget)
    if not changed:
        return net
    return net.model_copy(update={"weights": projected})


def init_relu_network(
    n_states: int,
    hidden: Sequence[int] = (8,),
    budget: float = 1.5,
    x_max: float = 1.0,
    embedding_kind: EmbeddingKind = EmbeddingKind.ONE_HOT,
    seed: int = 0,
    init_scale: Optional[float] = None,
) -> ReluNetwork:
    """Uniform(-w, w) weights projected onto the spectral budget.

    The default w puts the top singular value of each layer near budget/2.
    """
    embedding = embed_states(n_states, embedding_kind, x_max)
    rng = generator(seed)
    widths = [embedding.shape[1], *hidden, 1]
    weights = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        scale = init_scale
        if scale is None:
            scale = 0.5 * budget * np.sqrt(3.0) / (np.sqrt(fan_out) + np.sqrt(fan_in + 1))
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in + 1)))
    weights, _ = _project_layers(weights, budget)
    return ReluNetwork(
        weights=weights,
        budget=budget,
        x_max=x_max,
        embedding=embedding,
        embedding_kind=embedding_kind,
    )


def forward(weights: Sequence[np.ndarray], inputs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Outputs for a batch of inputs and the hidden pre-activations per layer."""
    h = np.atleast_2d(inputs)
    pre = []
    for w in weights[:-1]:
        z = h @ w[:, :-1].T + w[:, -1]
        pre.append(z)
        h = np.maximum(z, 0.0)
    out = h @ weights[-1][0, :-1] + weights[-1][0, -1]
    return out, pre


def _relu_grad(weights: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Backward pass for one input; a gate with pre-activation exactly 0 is closed."""
    activations = [x]
    gates = []
    h = x
    for w in weights[:-1]:
        z = w[:, :-1] @ h + w[:, -1]
        gates.append(z > 0)
        h = np.where(z > 0, z, 0.0)
        activations.append(h)

    blocks = [None] * len(weights)
    upstream = np.ones(1)
    for layer in range(len(weights) - 1, -1, -1):
        augmented = np.append(activations[layer], 1.0)
        blocks[layer] = np.outer(upstream, augmented).ravel()
        if layer > 0:
            upstream = (weights[layer][:, :-1].T @ upstream) * gates[layer - 1]
    return np.concatenate(blocks)


def value(model: ValueModel, state: int) -> float:
    if isinstance(model, LinearModel):
        return float(model.theta @ model.features.phi[state])
    out, _ = forward(model.weights, model.embedding[state])
    return float(out[0])


def values(model: ValueModel) -> np.ndarray:
    """Values at every state."""
    if isinstance(model, LinearModel):
        return model.features.phi @ model.theta
    out, _ = forward(model.weights, model.embedding)
    return out


def network_output(net: ReluNetwork, x: np.ndarray) -> float:
    out, _ = forward(net.weights, np.asarray(x, dtype=float))
    return float(out[0])


def grad(model: ValueModel, state: int) -> np.ndarray:
    """Gradient of the value at `state` w.r.t. the flat parameter vector."""
    if isinstance(model, LinearModel):
        return model.features.phi[state].copy()
    return _relu_grad(model.weights, model.embedding[state])


def input_grad(net: ReluNetwork, x: np.ndarray) -> np.ndarray:
    return _relu_grad(net.weights, np.asarray(x, dtype=float))


def parameters(model: ValueModel) -> np.ndarray:
    """Flat parameter vector (layers in order, each row-major)."""
    if isinstance(model, LinearModel):
        return model.theta.copy()
    return np.concatenate([w.ravel() for w in model.weights])


def with_parameters(model: ValueModel, theta: np.ndarray) -> ValueModel:
    """Successor model carrying the flat parameters `theta`."""
    theta = np.asarray(theta, dtype=float)
    if isinstance(model, LinearModel):
        if theta.shape != model.theta.shape:
            raise DimensionMismatch(f"expected {model.theta.shape[0]} parameters, got {theta.shape}")
        return model.model_copy(update={"theta": theta})
    sizes = [w.size for w in model.weights]
    if theta.shape != (sum(sizes),):
        raise DimensionMismatch(f"expected {sum(sizes)} parameters, got {theta.shape}")
    weights = []
    offset = 0
    for w, size in zip(model.weights, sizes):
        weights.append(theta[offset : offset + size].reshape(w.shape))
        offset += size
    return model.model_copy(update={"weights": weights})


def n_parameters(model: ValueModel) -> int:
    if isinstance(model, LinearModel):
        return model.features.dim
    return sum(w.size for w in model.weights)


def gradient_constants(net: ReluNetwork, r_max: float) -> GradConstants:
    """G = n B^n (X_max + 1), G1 = 2 G (R_max + X_max), L = G1 (1 + R_max)."""
    g = net.depth * net.budget ** net.depth * (net.x_max + 1.0)
    g1 = 2.0 * g * (r_max + net.x_max)
    return GradConstants(G=g, G1=g1, L=g1 * (1.0 + r_max))


def layerwise_affinity_defect(
    net_a: ReluNetwork,
    net_b: ReluNetwork,
    x: np.ndarray,
    layer: int,
    n_points: int = 5,
) -> float:
    """Largest deviation of the output from linear interpolation when only `layer` moves."""
    x = np.asarray(x, dtype=float)
    start = network_output(net_a, x)
    moved = list(net_a.weights)
    moved[layer] = net_b.weights[layer]
    end = network_output(net_a.model_copy(update={"weights": moved}), x)
    defect = 0.0
    for s in np.linspace(0.0, 1.0, n_points + 2)[1:-1]:
        moved[layer] = (1.0 - s) * net_a.weights[layer] + s * net_b.weights[layer]
        out, _ = forward(moved, x)
        defect = max(defect, abs(float(out[0]) - ((1.0 - s) * start + s * end)))
    return defect
