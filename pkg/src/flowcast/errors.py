"""Exception types shared across the package."""


class FlowcastError(Exception):
    """Base class for all package errors."""


class ShapeError(FlowcastError, ValueError):
    """An operation received tensors with incompatible shapes."""


class ContractError(FlowcastError, ValueError):
    """A call violated an operation's contract (e.g. non-scalar loss)."""


class ConfigError(FlowcastError, ValueError):
    """Invalid or inconsistent configuration."""


class IngestionError(FlowcastError, ValueError):
    """A data file failed validation during loading."""


class WindowError(FlowcastError, ValueError):
    """A window anchor falls outside the usable range of a series."""


class CheckpointError(FlowcastError, ValueError):
    """A checkpoint file is malformed or incompatible with the model."""


class TrainingDiverged(FlowcastError, RuntimeError):
    """Training produced a non-finite loss."""
