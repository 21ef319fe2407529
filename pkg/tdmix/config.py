"""Experiment configuration: one JSON file validated into ExperimentConfig."""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    ValidationInfo,
    field_validator,
    model_validator,
)

from shared.types import BoundVariant, EmbeddingKind, KernelKind
from tdmix.errors import ConfigError
from tdmix.seeding import derive_seeds

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = os.getenv("TDMIX_OUTPUT_DIR", "runs/tdmix")
MIN_GRADIENT_DRAWS = 10_000


def default_threads() -> int:
    return max(1, int(os.getenv("TDMIX_THREADS", "1")))


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ChainConfig(Section):
    """Which kernel to build."""

    kind: KernelKind = KernelKind.RENEWAL
    kappa: float = 2.5
    n_states: int = 200
    P: Optional[List[List[float]]] = None
    rewards: Optional[List[float]] = None
    r_max: Optional[float] = None
    p: float = 0.1
    q: float = 0.2
    distribution: Optional[List[float]] = None
    holding: float = 0.5
    seed: int = 0

    @model_validator(mode="after")
    def _matrix_given(self) -> "ChainConfig":
        if self.kind == KernelKind.MATRIX and (self.P is None or self.rewards is None):
            raise ValueError("matrix chains need P and rewards")
        if self.kind == KernelKind.IID and (self.distribution is None or self.rewards is None):
            raise ValueError("iid chains need distribution and rewards")
        return self


class ModelConfig(Section):
    kind: Literal["linear", "relu"] = "linear"
    features: Literal["tabular", "random"] = "tabular"
    dim: Optional[int] = None
    hidden: List[int] = Field(default_factory=lambda: [8])
    budget: float = Field(default=1.5, ge=0)
    x_max: float = Field(default=1.0, gt=0)
    embedding: EmbeddingKind = EmbeddingKind.ONE_HOT
    init_scale: Optional[float] = None


class ScheduleConfig(Section):
    c_alpha: float = Field(default=1.0, gt=0)
    eta: float = 0.8

    @field_validator("eta")
    @classmethod
    def _eta_range(cls, eta: float) -> float:
        if not 0.5 < eta <= 1.0:
            raise ValueError("eta must lie in (0.5, 1]")
        return eta


class SeedConfig(Section):
    """Either an explicit seed list or a base seed expanded into n_seeds streams."""

    base_seed: int = 0
    n_seeds: int = Field(default=1, ge=1)
    seeds: Optional[List[int]] = None

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, seeds: Optional[List[int]]) -> Optional[List[int]]:
        if seeds is not None and len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        return seeds

    def resolve(self) -> List[int]:
        if self.seeds is not None:
            return list(self.seeds)
        return derive_seeds(self.base_seed, "train", self.n_seeds)


class DiagnosticsConfig(Section):
    # acceptance runs must meet the full sample counts
    acceptance: bool = False
    decompose: bool = True
    blocks: bool = True
    coupling: bool = True
    crossings: bool = True
    concentration: bool = False
    variants: List[BoundVariant] = Field(default_factory=lambda: [BoundVariant.LINEAR_HP])
    delta: float = Field(default=0.1, gt=0, lt=1)
    beta_nominal: Optional[float] = None
    exponent_tolerance: float = Field(default=0.3, gt=0)
    min_r_squared: float = Field(default=0.98, ge=0, le=1)
    rate_tolerance_linear: float = Field(default=0.15, gt=0)
    rate_tolerance_relu: float = Field(default=0.25, gt=0)
    holder_gamma: float = Field(default=1.0, gt=0, le=1)
    block_size: int = Field(default=10, ge=1)
    n_blocks: int = Field(default=30, ge=2)
    block_seeds: int = Field(default=100, ge=1)
    coupling_T: int = Field(default=200, ge=1)
    coupling_seeds: int = Field(default=2000, ge=2)
    concentration_n: List[int] = Field(default_factory=lambda: [1000])
    concentration_seeds: int = Field(default=1000, ge=1)
    epsilons: List[float] = Field(default_factory=lambda: [0.02, 0.05, 0.1, 0.2])
    crossing_T: int = Field(default=2000, ge=1)
    gradient_draws: int = Field(default=MIN_GRADIENT_DRAWS, ge=1)
    reference_T: int = Field(default=100_000, ge=1)
    reference_c_alpha: float = Field(default=0.2, gt=0)

    @field_validator("gradient_draws")
    @classmethod
    def _enough_draws(cls, draws: int, info: ValidationInfo) -> int:
        if info.data.get("acceptance") and draws < MIN_GRADIENT_DRAWS:
            raise ValueError(f"acceptance runs need at least {MIN_GRADIENT_DRAWS} gradient draws")
        return draws


class WindowConfig(Section):
    mixing: Tuple[int, int] = (5, 80)
    burn_in: int = Field(default=1000, ge=0)
    coupling: Tuple[int, int] = (5, 100)

    @field_validator("mixing", "coupling")
    @classmethod
    def _ordered(cls, window: Tuple[int, int]) -> Tuple[int, int]:
        if not 1 <= window[0] < window[1]:
            raise ValueError("window must satisfy 1 <= t_min < t_max")
        return window


class ExperimentConfig(Section):
    """Full description of one study."""

    chain: ChainConfig = Field(default_factory=ChainConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    discount: float = 0.9
    T: int = Field(default=10_000, ge=1)
    checkpoint_every: Optional[int] = Field(default=None, ge=1)
    start: Union[int, Literal["stationary"]] = 0
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    diagnostics: DiagnosticsConfig = Field(default_factory=DiagnosticsConfig)
    windows: WindowConfig = Field(default_factory=WindowConfig)
    output_dir: str = DEFAULT_OUTPUT_DIR

    @field_validator("discount")
    @classmethod
    def _discount_range(cls, discount: float) -> float:
        if not 0.0 <= discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        return discount

    @property
    def beta_nominal(self) -> float:
        """Nominal mixing exponent: configured, else kappa - 1 for renewal chains, else 1."""
        if self.diagnostics.beta_nominal is not None:
            return self.diagnostics.beta_nominal
        if self.chain.kind == KernelKind.RENEWAL:
            return self.chain.kappa - 1.0
        return 1.0


def _field_path(error: ValidationError) -> Tuple[str, str]:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "<root>"
    return location, first["msg"]


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        path, message = _field_path(e)
        raise ConfigError(path, message) from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON: {e}") from e
    config = parse_config(data)
    logger.info(f"Loaded config {path} (hash {config_hash(config)[:12]})")
    return config


def config_hash(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
