"""Error types raised by tdmix."""

from typing import Optional


class TdMixError(Exception):
    """Base class for all tdmix errors."""


class ReducibleChain(TdMixError):
    """Kernel has more than one recurrent class, so no unique stationary law."""


class PeriodicChain(TdMixError):
    """Kernel is irreducible but periodic."""


class InvalidParameter(TdMixError):
    """A numeric parameter is outside its admissible range."""


class DimensionMismatch(TdMixError):
    """Array lengths do not agree with the kernel or model dimensions."""


class NonFiniteUpdate(TdMixError):
    """A TD update produced a non-finite TD error or gradient."""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class SingularSystem(TdMixError):
    """The projected Bellman system has no unique solution."""


class MissingStepData(TdMixError):
    """A history was recorded without the data a diagnostic needs."""


class InsufficientSeeds(TdMixError):
    """Too few independent runs for the requested statistic."""

    def __init__(self, required: int, got: int, what: str = "statistic"):
        self.required = required
        self.got = got
        super().__init__(f"{what} needs at least {required} seeds, got {got}")


class TrajectoryTooShort(TdMixError):
    """Trajectory is shorter than the requested block layout."""


class NonPositiveValue(TdMixError):
    """A log-log fit was asked to take the logarithm of a value <= 0."""


class WindowTooSmall(TdMixError):
    """A fit window contains too few points."""


class ConfigError(TdMixError):
    """Experiment configuration failed validation."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class MissingArtifact(TdMixError):
    """A stage input artifact does not exist."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"missing artifact: {path}")
