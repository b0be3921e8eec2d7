"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument breaks a documented precondition (shape, range, arity)."""


class DegenerateData(ValueError):
    """Input data carries no usable information (e.g. zero-variance batch)."""


class DegenerateGeometry(ValueError):
    """A geometric construction hits a zero denominator (e.g. shear plane)."""
