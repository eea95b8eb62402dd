"""Exception hierarchy shared by every tripad module."""


class TripError(Exception):
    """Base class for all library errors."""


class ParseError(TripError, ValueError):
    pass


class SchemaError(TripError, ValueError):
    pass


class DataError(TripError, ValueError):
    pass


class SizeError(TripError, ValueError):
    pass


class SpecError(TripError, ValueError):
    pass


class ConfigError(TripError, ValueError):
    pass


class ShapeError(TripError, ValueError):
    pass


class NumericsError(TripError, ArithmeticError):
    pass


class CheckpointError(TripError):
    pass


class IoError(TripError, OSError):
    pass


class DegenerateLabelsError(TripError, ValueError):
    pass


class MeasureUnavailable(TripError, RuntimeError):
    """Raised when no peak-allocation hook can be installed on this platform."""
