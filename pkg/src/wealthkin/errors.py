"""Exception hierarchy.

ConfigError maps to CLI exit code 2, NumericalAbort (and subclasses) to 3.
"""


class WealthkinError(Exception):
    """Base class for all package errors."""


class ConfigError(WealthkinError, ValueError):
    """Invalid configuration or invalid model parameters."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GridMismatchError(WealthkinError, ValueError):
    """Array length or grid identity does not match."""


class NumericalAbort(WealthkinError, RuntimeError):
    """A solver hit a state it cannot continue from.

    ``state`` carries a small dump of the offending state for post-mortem.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class CFLError(NumericalAbort):
    """Time step violates a stability bound."""


class ClosureError(NumericalAbort):
    """Hydrodynamic closure integral diverges on the half-line."""


class EquilibriumError(NumericalAbort):
    """Gibbs normalization or fixed-point evaluation failed."""


class SolvabilityError(NumericalAbort):
    """Right-hand side of a weak problem violates its compatibility condition."""
