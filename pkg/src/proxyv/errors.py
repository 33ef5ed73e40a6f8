"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or dtypes are incompatible; message names both sides."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or inconsistent."""


class StateError(RuntimeError):
    """An operation was called in the wrong order, e.g. backward before forward."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise cannot continue."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt, or fails digest verification."""
