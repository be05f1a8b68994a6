"""Exception types raised across the package."""


class FdchError(Exception):
    """Base class; the CLI turns these into a named error and nonzero exit."""


class DatasetError(FdchError, ValueError):
    pass


class ShapeError(FdchError, ValueError):
    pass


class NumericalError(FdchError, FloatingPointError):
    pass


class FormatError(FdchError, ValueError):
    """Malformed checkpoint or code index file."""


class ConfigError(FdchError, ValueError):
    pass


class EvaluationError(FdchError, ValueError):
    pass
