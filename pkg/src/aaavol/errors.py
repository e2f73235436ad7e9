"""Exception types raised across the library."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ArbitrageBoundError(DomainError):
    """An option price violates the static no-arbitrage bounds."""


class RangeError(DomainError):
    """A lookup falls outside a tabulated range (no extrapolation is done)."""


class ConvergenceError(ArithmeticError):
    """An iterative method failed to converge.

    ``gap`` carries the last measured distance to convergence when known.
    """

    def __init__(self, message, gap=None):
        super().__init__(message)
        self.gap = gap


class InvariantViolation(RuntimeError):
    """An internal invariant that theory guarantees was broken numerically."""


class ConfigError(ValueError):
    """A run configuration failed validation."""
