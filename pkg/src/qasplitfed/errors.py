"""Exception types shared across the simulator."""


class SplitFedError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(SplitFedError, ValueError):
    """Inconsistent shapes, incompatible parameters or bad settings."""


class ProtocolError(SplitFedError, RuntimeError):
    """Out-of-order, stale or malformed client/server exchange."""


class DataError(SplitFedError, ValueError):
    """Invalid data values (empty sets, out-of-range labels, NaN losses)."""
