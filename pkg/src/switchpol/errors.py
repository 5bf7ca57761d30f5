"""Exception hierarchy shared by every module of the package."""


class SwitchpolError(Exception):
    """Base class for all package errors."""


class ArgumentError(SwitchpolError, ValueError):
    """Malformed or inconsistent arguments (empty vectors, shape mismatches)."""


class NumericDomainError(SwitchpolError, ArithmeticError):
    """A matrix that must be positive definite is not."""

    def __init__(self, message, mode=None):
        if mode is not None:
            message = f"{message} (mode {mode})"
        super().__init__(message)
        self.mode = mode


class LayoutError(ArgumentError):
    """History-vector layout does not satisfy an ordering contract."""


class CapacityError(SwitchpolError):
    """Instance too large for an exhaustive computation."""


class SolverError(SwitchpolError, RuntimeError):
    """An iterative solver failed to converge or make progress."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class InversionInfeasibleError(SwitchpolError):
    """The input inversion residual has no root on the admissible steering set."""

    def __init__(self, message, t=None):
        if t is not None:
            message = f"{message} (t={t})"
        super().__init__(message)
        self.t = t


class IntegrationError(SwitchpolError):
    """A discretization step left the valid state region."""


class GeometryError(SwitchpolError):
    """Projection or lookup on a track failed."""


class StabilityInfeasibleError(SwitchpolError):
    """No strictly feasible point for the Lyapunov constraints could be built."""


class GenerationError(SwitchpolError):
    """Closed-loop data generation left the valid region."""


class FitError(SwitchpolError):
    """Every start of a multi-start fit failed."""


class ParseError(SwitchpolError, ValueError):
    """A data file could not be parsed; ``row``/``column`` are 1-based."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(SwitchpolError, ValueError):
    """A data file set is incomplete or has the wrong structure."""


class ConfigError(SwitchpolError, ValueError):
    """A configuration document is invalid; ``key_path`` locates the problem."""

    def __init__(self, message, key_path=None):
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)
        self.key_path = key_path
