"""Shared exception types."""


class DimensionError(ValueError):
    """A tensor dimension does not satisfy a divisibility or size requirement."""


class AlignmentError(ValueError):
    """Two views that must be temporally/spatially aligned are not."""


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unrealizable."""


class StateError(RuntimeError):
    """An operation was invoked on stale or uninitialized state."""
