"""Exception and warning types shared across the package."""


class QtrajError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QtrajError):
    """Operands live on different or malformed tensor-product spaces."""


class TruncationError(QtrajError):
    """A Fock-space truncation is invalid or too small for the requested state."""


class StepSizeError(QtrajError):
    """A requested integration step violates the dt * rate guard."""


class IntegrationUnstableError(QtrajError):
    """A stochastic step moved the state too far to be trusted."""

    def __init__(self, msg, step_index=None, trajectory_index=None):
        super().__init__(msg)
        self.step_index = step_index
        self.trajectory_index = trajectory_index


class RecordUndefinedError(QtrajError):
    """A measurement record was requested for a channel that produces none."""


class UnderflowError(QtrajError):
    """A conditioning update produced a state of vanishing probability weight."""


class AboveThresholdError(QtrajError):
    """Parametric pump exceeds the oscillation threshold."""


class StraddlingResonanceError(QtrajError):
    """Dispersive parameters sit on a pole of the perturbative expression."""


class GainError(QtrajError):
    """A feedback gain lies outside its guarded stability range."""


class FitFailedError(QtrajError):
    """Input data does not admit the requested fit."""


class ConfigError(QtrajError):
    """A run configuration file is malformed or inconsistent."""

    def __init__(self, msg, path=None, line=None):
        if path is not None and line is not None:
            msg = f"{path}:{line}: {msg}"
        elif path is not None:
            msg = f"{path}: {msg}"
        super().__init__(msg)
        self.path = path
        self.line = line


class RegimeWarning(UserWarning):
    """Parameters leave the regime where a model reduction is controlled."""
