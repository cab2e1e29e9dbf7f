"""Exception types shared across the package.

Every error raised by the library is a subclass of one of these, so
callers (notably the CLI) can map failure classes to exit codes without
string matching.
"""


class ConfigError(ValueError):
    """A configuration or model-dimension constraint was violated."""


class ShapeError(ValueError):
    """An array argument had an incompatible shape."""


class EmptyCacheError(ValueError):
    """An operation required a non-empty cache or selection."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ParameterError(ValueError):
    """An operation parameter was out of its valid range or missing."""


class EncodingError(ValueError):
    """Bit-packed data was inconsistent with its declared layout."""


class SchedulingError(RuntimeError):
    """A simulated resource or buffer protocol was violated."""


class TraceFormatError(RuntimeError):
    """A trace file was malformed, truncated, or failed its digest check."""
