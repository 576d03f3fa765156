"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the requested operation."""


class DegenerateRowError(ValueError):
    """A score row has no visible (unmasked) entry."""


class ConstraintError(ValueError):
    """A documented precondition on arguments was violated."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""
