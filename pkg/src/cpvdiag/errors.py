"""Exception hierarchy shared by every cpvdiag module."""


class CpvError(Exception):
    """Base class for all errors raised by cpvdiag."""


class ParameterDomainError(CpvError, ValueError):
    """An input parameter lies outside its physical domain."""


class CoverageError(CpvError, ValueError):
    """A spectrum does not cover the wavelength window an operation needs."""


class UnfittableDNIError(CpvError):
    """No aerosol optical depth in the search range reproduces the measured DNI."""


class SolverFailure(CpvError, ArithmeticError):
    """The implicit diode equation could not be bracketed or solved."""

    def __init__(self, message, cell_index=None):
        if cell_index is not None:
            message = f"cell {cell_index}: {message}"
        super().__init__(message)
        self.cell_index = cell_index


class CalibrationError(CpvError):
    """Reference calibration did not converge."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class OutOfValidityError(CpvError, ValueError):
    """An empirical correlation was evaluated outside its fitted range."""


class ConfigurationError(CpvError, ValueError):
    """A configuration file or mapping is incomplete or inconsistent."""


class DiagnosisInfeasible(CpvError):
    """A diagnosis stage could not reach its tolerance within the search bounds."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InputDataError(CpvError, ValueError):
    """Input data is malformed, unordered or insufficient."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InsufficientDataError(CpvError):
    """Inputs parsed, but too few usable samples remain for the operation."""
