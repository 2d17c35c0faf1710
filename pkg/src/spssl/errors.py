"""Error types shared across the package.

Every failure mode raised on purpose derives from SpsslError so the CLI can
report a stable error-name prefix and exit nonzero.
"""


class SpsslError(Exception):
    pass


class ShapeError(SpsslError):
    """Tensor shapes (or dtypes) incompatible with the requested operation."""


class NumericError(SpsslError):
    """NaN/Inf encountered where finite values are required."""


class StateError(SpsslError):
    """Operation issued against an object in the wrong lifecycle state."""


class ConfigError(SpsslError):
    """Invalid or inconsistent run configuration."""


class DomainError(SpsslError):
    """Input values outside the mathematically valid domain."""


class RangeError(SpsslError):
    """Scalar argument outside its allowed range."""


class DegenerateWeightError(SpsslError):
    """All consistency weights vanished; the weighted mean is undefined."""


class EmptyMaskError(SpsslError):
    """Surface-distance metrics need both masks non-empty."""
