"""Pytest fixtures for tdmix tests."""

import json

import pytest

from shared.types import EmbeddingKind, StepSchedule
from tdmix import approx, chain


@pytest.fixture(autouse=True)
def mock_env_vars(monkeypatch, tmp_path):
    """Keep artifacts and worker settings local to each test."""
    monkeypatch.setenv("TDMIX_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("TDMIX_THREADS", "1")


@pytest.fixture
def two_state():
    """Two-state chain with p=0.1, q=0.2 and rewards (1, 0)."""
    return chain.make_two_state(0.1, 0.2)


@pytest.fixture
def renewal():
    """Truncated renewal chain with kappa=2.5 on 60 states."""
    return chain.make_renewal_chain(2.5, 60)


@pytest.fixture
def random_kernel():
    """Dense random 5-state kernel."""
    return chain.make_random_kernel(5, seed=11)


@pytest.fixture
def schedule():
    return StepSchedule(c_alpha=1.0, eta=0.8)


@pytest.fixture
def tabular_model(random_kernel):
    return approx.make_linear_model(approx.tabular_features(random_kernel.n_states))


@pytest.fixture
def relu_net(random_kernel):
    """One hidden layer of width 6 over one-hot inputs, budget 1.5."""
    return approx.init_relu_network(random_kernel.n_states, hidden=(6,), budget=1.5, seed=3)


@pytest.fixture
def deep_relu_net():
    """Two hidden layers over coordinate inputs."""
    return approx.init_relu_network(
        8, hidden=(5, 4), budget=1.2, embedding_kind=EmbeddingKind.COORDINATE, seed=5, init_scale=1.0
    )


@pytest.fixture
def minimal_config():
    """Two-state chain, tabular TD, T=100, one seed, heavy diagnostics switched off."""
    return {
        "chain": {"kind": "two_state", "p": 0.1, "q": 0.2},
        "model": {"kind": "linear", "features": "tabular"},
        "schedule": {"c_alpha": 1.0, "eta": 0.8},
        "discount": 0.9,
        "T": 100,
        "seeds": {"base_seed": 7, "n_seeds": 1},
        "diagnostics": {
            "blocks": False,
            "coupling": True,
            "coupling_T": 30,
            "coupling_seeds": 50,
        },
        "windows": {"mixing": [1, 20], "burn_in": 10, "coupling": [1, 30]},
    }


@pytest.fixture
def config_file(tmp_path, minimal_config):
    """minimal_config written to disk with the output directory under tmp_path."""
    data = {**minimal_config, "output_dir": str(tmp_path / "study")}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(data))
    return path


@pytest.fixture
def server():
    """Create a TdMixMCPServer."""
    from tdmix.server import TdMixMCPServer

    return TdMixMCPServer()

