"""Exception types raised across the package."""


class IdkmError(Exception):
    """Base class for all errors raised by this package."""


class PartitionError(IdkmError):
    """A flat weight vector cannot be split into whole sub-vectors."""


class ShapeError(IdkmError):
    """Operands have incompatible shapes."""


class ParamError(IdkmError):
    """A parameter is outside its valid range."""


class NumericsError(IdkmError):
    """A computation produced non-finite values."""


class AdjointDivergence(IdkmError):
    """The averaged adjoint iteration failed to converge after all restarts."""


class FormatError(IdkmError):
    """A file does not match its expected on-disk format."""


class ConfigError(IdkmError):
    """A run configuration is invalid or contains unknown keys."""
