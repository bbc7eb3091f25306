"""Exception hierarchy shared by all modules."""


class MfgJumpError(Exception):
    """Base class for library errors."""


class ConfigurationError(MfgJumpError, ValueError):
    """Invalid user configuration (grid, scenario, population law...)."""


class ModelViolationError(MfgJumpError):
    """A model bound was breached at run time, e.g. intensity outside [0, c_nu]."""


class SolverError(MfgJumpError, RuntimeError):
    """A backward solver could not complete."""

    def __init__(self, message, cell=None):
        super().__init__(message if cell is None else f"{message} (cell {cell})")
        self.cell = cell


class SingularityError(MfgJumpError, ArithmeticError):
    """The equilibrium reconstruction is singular (mean competition weight equal to one)."""


class TreeTooLargeError(MfgJumpError):
    """Brute-force enumeration would exceed the configured leaf budget."""
