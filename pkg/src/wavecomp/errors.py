"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ValidationError(ValueError):
    """An argument or configuration value violates a documented precondition."""


class FormatError(ValueError):
    """A binary or text input does not match its declared file format."""
