"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(ValueError):
    """Geometry is singular (coincident points, camera at a sphere center, ...)."""


class NumericalDegeneracyError(ArithmeticError):
    """A matrix that must be invertible is not."""
