class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class FormatError(ValueError):
    """A data or checkpoint file does not follow its binary layout."""


class ConsistencyError(ValueError):
    """A file parsed correctly but its contents disagree with each other."""


class NumericalError(FloatingPointError):
    """A NaN or infinity appeared where finite values are required."""
