"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or indices are inconsistent."""


class NonFiniteError(ValueError):
    """A NaN or Inf showed up where only finite values are allowed."""


class ConfigError(ValueError):
    """A model or adapter configuration violates its invariants."""


class CheckpointError(ValueError):
    """An adapter checkpoint file is malformed, truncated or incompatible."""
