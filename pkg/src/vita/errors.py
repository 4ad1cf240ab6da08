"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class LoadError(ValueError):
    """A weights container or data file is missing, malformed, or inconsistent."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (e.g. querying a tensor that was never recorded)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class ManifestError(ValueError):
    """A dataset manifest row failed validation."""
