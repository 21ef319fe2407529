"""Artifact persistence: JSON with hex-float parameters, pandas CSV tables, manifests."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from shared.types import (
    Decomposition,
    FeatureMap,
    FixedPoint,
    IterateHistory,
    LinearModel,
    Manifest,
    ReluNetwork,
    StepSchedule,
    TransitionKernel,
    Trajectory,
)
from tdmix.errors import InvalidParameter, MissingArtifact

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
MANIFEST_NAME = "manifest.json"


def _hex(values: np.ndarray) -> List[Any]:
    array = np.asarray(values, dtype=float)
    if array.ndim == 0:
        return float(array).hex()
    return [_hex(row) for row in array]


def _unhex(values: Any) -> np.ndarray:
    if isinstance(values, str):
        return np.array(float.fromhex(values))
    return np.array([_unhex(row) for row in values], dtype=float)


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(str(path))
    return json.loads(path.read_text())


def write_csv(path: PathLike, frame: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def read_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(str(path))
    return pd.read_csv(path, float_precision="round_trip")


# Kernels
def kernel_to_dict(kernel: TransitionKernel) -> Dict[str, Any]:
    return {
        "n_states": kernel.n_states,
        "P": _hex(kernel.P),
        "rewards": _hex(kernel.rewards),
        "r_max": kernel.r_max,
        "kind": kernel.kind.value,
        "params": kernel.params,
    }


def kernel_from_dict(data: Dict[str, Any]) -> TransitionKernel:
    return TransitionKernel(
        P=_unhex(data["P"]),
        rewards=_unhex(data["rewards"]),
        r_max=data["r_max"],
        kind=data["kind"],
        params=data.get("params", {}),
    )


def save_kernel(path: PathLike, kernel: TransitionKernel) -> Path:
    return write_json(path, kernel_to_dict(kernel))


def load_kernel(path: PathLike) -> TransitionKernel:
    return kernel_from_dict(read_json(path))


# Models
def model_to_dict(model: Union[LinearModel, ReluNetwork]) -> Dict[str, Any]:
    if isinstance(model, LinearModel):
        features = model.features
        return {
            "kind": "linear",
            "dims": [features.n_states, features.dim],
            "phi": _hex(features.phi),
            "c_phi": features.c_phi,
            "c_gamma": features.c_gamma,
            "holder_gamma": features.holder_gamma,
            "theta": _hex(model.theta),
        }
    return {
        "kind": "relu",
        "dims": [model.embedding.shape[1], *model.hidden_widths, 1],
        "weights": [_hex(w) for w in model.weights],
        "B": model.budget,
        "X_max": model.x_max,
        "embedding": _hex(model.embedding),
        "embedding_kind": model.embedding_kind.value,
    }


def model_from_dict(data: Dict[str, Any]) -> Union[LinearModel, ReluNetwork]:
    if data["kind"] == "linear":
        features = FeatureMap(
            phi=_unhex(data["phi"]),
            c_phi=data["c_phi"],
            c_gamma=data["c_gamma"],
            holder_gamma=data["holder_gamma"],
        )
        return LinearModel(features=features, theta=_unhex(data["theta"]))
    if data["kind"] == "relu":
        return ReluNetwork(
            weights=[_unhex(w) for w in data["weights"]],
            budget=data["B"],
            x_max=data["X_max"],
            embedding=_unhex(data["embedding"]),
            embedding_kind=data["embedding_kind"],
        )
    raise InvalidParameter(f"unknown model kind: {data['kind']}")


def save_model(path: PathLike, model: Union[LinearModel, ReluNetwork]) -> Path:
    return write_json(path, model_to_dict(model))


def load_model(path: PathLike) -> Union[LinearModel, ReluNetwork]:
    return model_from_dict(read_json(path))


def save_fixed_point(path: PathLike, fixed_point: FixedPoint) -> Path:
    return write_json(
        path,
        {
            "theta_star": _hex(fixed_point.theta_star),
            "residual": fixed_point.residual,
            "method": fixed_point.method.value,
        },
    )


def load_fixed_point(path: PathLike) -> FixedPoint:
    data = read_json(path)
    return FixedPoint(theta_star=_unhex(data["theta_star"]), residual=data["residual"], method=data["method"])


# Trajectories and histories
def save_trajectory(path: PathLike, trajectory: Trajectory) -> Path:
    frame = pd.DataFrame(
        {
            "t": np.arange(len(trajectory.states)),
            "state": trajectory.states,
            "reward": np.append(trajectory.rewards, np.nan),
        }
    )
    return write_csv(path, frame)


def load_trajectory(path: PathLike, seed: int, kernel_id: str) -> Trajectory:
    frame = read_csv(path)
    return Trajectory(
        states=frame["state"].to_numpy(),
        rewards=frame["reward"].to_numpy()[:-1],
        seed=seed,
        kernel_id=kernel_id,
    )


def save_history(
    csv_path: PathLike,
    sidecar_path: PathLike,
    history: IterateHistory,
    theta_star: Optional[np.ndarray] = None,
) -> None:
    """Per-step CSV (err filled at checkpoints) plus a JSON sidecar of checkpointed parameters."""
    T = history.n_updates
    columns: Dict[str, Any] = {"t": np.arange(1, T + 1)}
    if history.full_stream:
        columns.update(
            state=history.states, next_state=history.next_states, reward=history.rewards
        )
    columns.update(alpha=history.alphas, delta=history.deltas)
    if theta_star is not None:
        err = np.full(T, np.nan)
        norms = np.linalg.norm(history.thetas - theta_star, axis=1)
        at = history.checkpoints >= 1
        err[history.checkpoints[at] - 1] = norms[at]
        columns["err"] = err
    write_csv(csv_path, pd.DataFrame(columns))
    write_json(
        sidecar_path,
        {
            "model0": model_to_dict(history.model0),
            "schedule": history.schedule.model_dump(),
            "discount": history.discount,
            "seed": history.seed,
            "kernel_id": history.kernel_id,
            "checkpoints": history.checkpoints.tolist(),
            "thetas": _hex(history.thetas),
        },
    )


def load_history(csv_path: PathLike, sidecar_path: PathLike) -> IterateHistory:
    sidecar = read_json(sidecar_path)
    frame = read_csv(csv_path)
    stream = {}
    if "state" in frame.columns:
        stream = {
            "states": frame["state"].to_numpy(),
            "next_states": frame["next_state"].to_numpy(),
            "rewards": frame["reward"].to_numpy(),
        }
    return IterateHistory(
        model0=model_from_dict(sidecar["model0"]),
        schedule=StepSchedule(**sidecar["schedule"]),
        discount=sidecar["discount"],
        seed=sidecar["seed"],
        kernel_id=sidecar["kernel_id"],
        alphas=frame["alpha"].to_numpy(),
        deltas=frame["delta"].to_numpy(),
        checkpoints=sidecar["checkpoints"],
        thetas=_unhex(sidecar["thetas"]),
        **stream,
    )


def save_decomposition(path: PathLike, decomposition: Decomposition) -> Path:
    frame = pd.DataFrame(
        {
            "t": decomposition.ts,
            "err": decomposition.err_norm,
            "norm_M": decomposition.martingale_norm,
            "norm_R": decomposition.remainder_norm,
        }
    )
    return write_csv(path, frame)


def save_series(path: PathLike, **columns: Sequence[float]) -> Path:
    return write_csv(path, pd.DataFrame(columns))


# Manifest
def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: PathLike, config_hash: str, version: str) -> Manifest:
    """Checksum every artifact under out_dir except the manifest itself."""
    out_dir = Path(out_dir)
    files = {
        str(path.relative_to(out_dir)): file_sha256(path)
        for path in sorted(out_dir.rglob("*"))
        if path.is_file() and path.name != MANIFEST_NAME
    }
    manifest = Manifest(config_hash=config_hash, version=version, files=files)
    write_json(out_dir / MANIFEST_NAME, manifest.model_dump())
    logger.info(f"Wrote manifest with {len(files)} files to {out_dir}")
    return manifest
