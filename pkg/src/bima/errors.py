"""Exception types raised across the package."""


class BimaError(Exception):
    pass


class InvalidArgumentError(BimaError, ValueError):
    pass


class InvalidStateError(BimaError, ValueError):
    """A sampler state violates a model invariant (e.g. non-positive variance)."""


class DegenerateKernelError(BimaError):
    pass


class NumericalRankError(BimaError):
    pass


class IdentifiabilityError(BimaError):
    """The exposure/confounder design is rank deficient."""


class InitializationFailed(BimaError):
    pass


class DivergenceError(BimaError):
    """Log-posterior became non-finite during sampling."""
