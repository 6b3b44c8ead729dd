"""Error types shared across the package.

Everything derives from ValueError or RuntimeError so callers that do not
care about the distinction can catch the usual built-ins.
"""


class ValidationError(ValueError):
    """Invalid parameter or configuration value."""


class SupportError(ValueError):
    """A point lies outside the support of a distribution."""


class FamilyMismatchError(ValueError):
    """Two exponential-family objects belong to different families."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (reuse after backward, foreign tensors, ...)."""


class UnsupportedGradientError(RuntimeError):
    """Requested a pathwise gradient that is not available."""


class ConfigError(ValueError):
    """An experiment or training configuration failed validation."""


class SchemaVersionError(ValueError):
    """A serialized document carries an unsupported schema version."""


class NotApplicableError(ValueError):
    """A construction's precondition does not hold for the given object."""


class InsufficientEnvironmentsError(ValueError):
    """Fewer environments than the sufficiency condition requires."""
