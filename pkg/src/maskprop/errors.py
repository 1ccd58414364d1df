"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Inputs, files, or shapes violate a documented contract."""


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to reach its tolerance."""
