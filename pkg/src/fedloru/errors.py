"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class RankError(ValueError):
    """A requested factorization rank is out of range."""


class NumericError(ArithmeticError):
    """An iterative routine failed to converge, or a value became non-finite."""


class UndefinedInputError(ValueError):
    """The operation is undefined at this input (e.g. stable rank of zero)."""


class DataError(ValueError):
    """Labels, shards or files are malformed."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class UnsupportedArchitectureError(ValueError):
    """The model architecture is not supported by the requested operation."""
