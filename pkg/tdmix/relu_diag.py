"""Activation patterns, boundary distances and region-crossing counts of ReLU TD runs."""

import logging
import math
from typing import List, Optional

import numpy as np

from shared.types import ActivationPattern, CrossingRecord, IterateHistory, ReluNetwork
from tdmix.approx import forward, parameters, with_parameters
from tdmix.errors import InvalidParameter, MissingStepData
from tdmix.seeding import generator

logger = logging.getLogger(__name__)

N_LANDMARKS = 64
PLATEAU_SHARE = 0.05


def activation_pattern(net: ReluNetwork, x: np.ndarray) -> ActivationPattern:
    """Gate bits per hidden layer; on iff the pre-activation is strictly positive."""
    _, pre = forward(net.weights, np.asarray(x, dtype=float))
    return ActivationPattern(bits=[z[0] > 0 for z in pre])


def landmark_bits(net: ReluNetwork, landmarks: np.ndarray) -> np.ndarray:
    """(n_landmarks, n_units) gate matrix."""
    _, pre = forward(net.weights, landmarks)
    if not pre:
        return np.zeros((len(landmarks), 0), dtype=bool)
    return np.concatenate(pre, axis=1) > 0


def make_landmarks(net: ReluNetwork, n_landmarks: int = N_LANDMARKS, seed: int = 0) -> np.ndarray:
    """State embeddings (evenly thinned if too many), padded with random vectors of norm min(1, x_max)."""
    embedding = net.embedding
    if len(embedding) >= n_landmarks:
        index = np.unique(np.round(np.linspace(0, len(embedding) - 1, n_landmarks)).astype(np.int64))
        return embedding[index].copy()
    rng = generator(seed)
    extra = rng.normal(size=(n_landmarks - len(embedding), embedding.shape[1]))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.vstack([embedding, min(1.0, net.x_max) * extra])


def boundary_distances(net: ReluNetwork, landmarks: np.ndarray) -> np.ndarray:
    """|z| / ||d z / d theta|| for every (landmark, hidden unit).

    A unit's pre-activation depends on its own row of weights and, through the
    open gates, on every earlier layer.
    """
    weights = net.weights
    landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
    activations = [landmarks]
    gates = []
    pres = []
    h = landmarks
    for w in weights[:-1]:
        z = h @ w[:, :-1].T + w[:, -1]
        pres.append(z)
        gates.append(z > 0)
        h = np.where(z > 0, z, 0.0)
        activations.append(h)
    if not pres:
        return np.zeros((len(landmarks), 0))

    augmented = [np.sum(a ** 2, axis=1) + 1.0 for a in activations]
    distances = []
    for layer, z in enumerate(pres):
        squared = np.repeat(augmented[layer][:, None], z.shape[1], axis=1)
        if layer > 0:
            upstream = weights[layer][None, :, :-1] * gates[layer - 1][:, None, :]
            for below in range(layer - 1, -1, -1):
                squared += np.sum(upstream ** 2, axis=2) * augmented[below][:, None]
                if below > 0:
                    upstream = np.einsum("puw,wv->puv", upstream, weights[below][:, :-1])
                    upstream = upstream * gates[below - 1][:, None, :]
        distances.append(np.abs(z) / np.sqrt(squared))
    return np.concatenate(distances, axis=1)


def min_boundary_distance(net: ReluNetwork, landmarks: np.ndarray) -> float:
    distances = boundary_distances(net, landmarks)
    return float(distances.min()) if distances.size else math.inf


class CrossingTracker:
    """Streams consecutive networks of one run and counts gate flips at fixed landmarks."""

    def __init__(self, landmarks: np.ndarray):
        self.landmarks = np.atleast_2d(np.asarray(landmarks, dtype=float))
        self.n_units: Optional[int] = None
        self._rows: List[tuple] = []

    def observe(self, t: int, before: ReluNetwork, after: ReluNetwork, alpha: float) -> None:
        bits_before = landmark_bits(before, self.landmarks)
        bits_after = landmark_bits(after, self.landmarks)
        self.n_units = bits_before.shape[1]
        kappa = int(np.sum(bits_before != bits_after))
        displacement = float(np.linalg.norm(parameters(after) - parameters(before)))

        per_landmark = boundary_distances(before, self.landmarks)
        if per_landmark.size:
            nearest = per_landmark.min(axis=1)
            with np.errstate(divide="ignore"):
                ratio = np.where(nearest > 0, displacement / nearest, np.inf)
            allowed = np.where(
                displacement == 0, 0, np.minimum(np.ceil(ratio), self.n_units)
            )
            gamma = float(nearest.min())
            bound = int(allowed.sum())
        else:
            gamma, bound = math.inf, 0
        self._rows.append((t, kappa, displacement, alpha, gamma, bound))

    def record(self) -> CrossingRecord:
        rows = np.array(self._rows, dtype=float).reshape(-1, 6)
        kappa = rows[:, 1].astype(np.int64)
        return CrossingRecord(
            t=rows[:, 0].astype(np.int64),
            kappa_hat=kappa,
            displacement=rows[:, 2],
            alpha=rows[:, 3],
            gamma_min_proxy=rows[:, 4],
            bound=rows[:, 5].astype(np.int64),
            cum_kappa=np.cumsum(kappa),
            n_landmarks=len(self.landmarks),
            n_units=self.n_units or 0,
        )


def track_crossings(
    history: IterateHistory, landmarks: Optional[np.ndarray] = None, seed: int = 0
) -> CrossingRecord:
    """Gate flips between consecutive iterates of a ReLU run checkpointed at every step."""
    if not isinstance(history.model0, ReluNetwork):
        raise InvalidParameter("crossing tracking needs a ReLU network history")
    expected = np.arange(history.n_updates + 1)
    if not np.array_equal(history.checkpoints, expected):
        raise MissingStepData("crossing tracking needs parameters after every step")
    net = history.model0
    if landmarks is None:
        landmarks = make_landmarks(net, seed=seed)
    tracker = CrossingTracker(landmarks)
    before = with_parameters(net, history.thetas[0])
    for k in range(history.n_updates):
        after = with_parameters(net, history.thetas[k + 1])
        tracker.observe(k + 1, before, after, float(history.alphas[k]))
        before = after
    record = tracker.record()
    logger.info(f"Tracked crossings over {history.n_updates} steps: total={int(record.cum_kappa[-1])}")
    return record


def crossing_plateau(record: CrossingRecord) -> float:
    """Share of all crossings that happen in the last decade of steps (t > T/10)."""
    cumulative = record.cum_kappa
    if len(cumulative) == 0 or cumulative[-1] == 0:
        return 0.0
    T = int(record.t[-1])
    earlier = cumulative[record.t <= T // 10]
    before_decade = int(earlier[-1]) if earlier.size else 0
    return (int(cumulative[-1]) - before_decade) / int(cumulative[-1])


def crossing_bound_violations(record: CrossingRecord) -> float:
    """Fraction of steps where the flip count exceeds the displacement/distance bound."""
    if len(record.kappa_hat) == 0:
        return 0.0
    return float(np.mean(record.kappa_hat > record.bound))
