"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class FormatError(ValueError):
    """A file does not follow its on-disk format."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""


class GenerationError(RuntimeError):
    """Synthetic scene generation gave up after bounded retries."""
