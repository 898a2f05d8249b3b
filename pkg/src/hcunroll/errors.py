"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericalError(FloatingPointError):
    """A computation produced a non-finite value."""
