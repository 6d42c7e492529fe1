"""Exception hierarchy shared across the toolkit."""


class AssimlabError(Exception):
    """Base class for all toolkit errors."""


class ContractViolation(AssimlabError):
    """A caller broke a documented precondition (shape mismatch, bad argument)."""


class ConfigError(AssimlabError):
    """Invalid or inconsistent configuration."""


class DegenerateCoverageError(ConfigError):
    """Observation coverage rounds to zero observed variables per step."""


class NumericalError(AssimlabError):
    """A numerical computation produced non-finite values."""


class DifferentiationError(NumericalError):
    """Non-finite primal or gradient during a backward pass.

    Carries the kind of the offending graph operation in ``op_kind``.
    """

    def __init__(self, message, op_kind=None):
        super().__init__(message)
        self.op_kind = op_kind


class BlowupError(NumericalError):
    """Time integration produced non-finite states (step size too large)."""


class InitializationError(AssimlabError):
    """A state initialization strategy cannot be applied (e.g. a variable
    with no observation anywhere in the window)."""


class CalibrationError(AssimlabError):
    """Hyperparameter calibration failed (e.g. every candidate run diverged)."""


class PersistenceError(AssimlabError):
    """Base class for file format errors."""


class MagicMismatchError(PersistenceError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(PersistenceError):
    """File format version is not supported."""


class TruncatedFileError(PersistenceError):
    """File ended before all declared payload was read."""


class ShapeMismatchError(PersistenceError):
    """Stored tensor shapes disagree with what the header or config implies."""
