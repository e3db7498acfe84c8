"""Exception types shared across the toolkit."""


class StationcastError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(StationcastError):
    """Input data violates the declared schema (unknown factor, bad header)."""


class StructuralError(StationcastError):
    """Input data is structurally inconsistent (ragged lengths, bad magic)."""


class ConfigError(StationcastError):
    """A configuration value is out of its valid range or inconsistent."""


class PipelineError(StationcastError):
    """A data-pipeline step cannot proceed (all stations dropped, unfillable gap)."""


class ShapeError(StationcastError):
    """Tensor shapes are incompatible for the requested operation."""


class TrainingError(StationcastError):
    """Training aborted (non-finite loss, invalid schedule)."""


class CheckpointError(StationcastError):
    """A checkpoint file is corrupt or from an incompatible version."""


class RegressionError(StationcastError):
    """A regression fit is ill-posed or a model is used before fitting."""
