"""Exception hierarchy; the CLI maps each family to its own exit status."""


class MetafapError(Exception):
    """Base class for every error raised deliberately by this package."""


class ValidationError(MetafapError, ValueError):
    """Bad input: out-of-domain values, malformed files, inconsistent configs."""


class DomainError(ValidationError):
    """An input lies outside the physical domain the oracle is defined on."""


class InsufficientDataError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class DivergenceError(MetafapError, ArithmeticError):
    """Training produced a non-finite loss."""


class SingularNetworkError(MetafapError, ArithmeticError):
    """The ABCD-to-S conversion denominator vanished."""
