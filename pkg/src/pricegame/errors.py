"""Semantic exception hierarchy shared across the package."""


class PriceGameError(Exception):
    """Base class for package errors."""


class DomainError(PriceGameError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DegenerateDerivativeError(PriceGameError, ValueError):
    """A link derivative is too close to zero for a stable quotient."""


class ShapeViolationError(PriceGameError, RuntimeError):
    """A monotonicity or concavity requirement was found to be violated."""


class SingularDesignError(PriceGameError, ValueError):
    """A regression design matrix is rank deficient or badly conditioned."""


class ConvergenceError(PriceGameError, RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance.

    Carries the last residual so callers can decide whether to accept it.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EstimateInvalidError(PriceGameError, RuntimeError):
    """A fitted model violates the sign or validity conventions it must obey."""


class ConfigurationError(PriceGameError, ValueError):
    """A market or experiment configuration violates its invariants."""


class FormatError(PriceGameError, ValueError):
    """A file does not match the expected schema."""
