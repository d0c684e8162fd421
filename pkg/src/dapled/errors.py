"""Exception types shared across the package."""


class DapledError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(DapledError, ValueError):
    """Tensor/array shapes are incompatible with an operation's contract."""


class ValidationError(DapledError, ValueError):
    """Input data violates a precondition (NaN pixels, empty prompt, ...)."""


class ConfigError(DapledError, ValueError):
    """A configuration value is out of its legal range or inconsistent."""


class NumericError(DapledError, ArithmeticError):
    """A numeric degeneracy was hit (zero-norm embedding, non-finite loss component)."""


class CheckpointError(DapledError, RuntimeError):
    """A checkpoint could not be written, read, or is incompatible with the model."""


class TrainingAbortError(DapledError, RuntimeError):
    """Training was aborted; the message names the offending loss component."""
