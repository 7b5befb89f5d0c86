"""Exception types shared across the package.

Every failure mode that callers are expected to branch on gets its own
class; generic ValueError is reserved for programmer mistakes.
"""


class ShapeError(ValueError):
    """An operand's shape or dtype does not satisfy an operation's contract."""


class ConfigError(ValueError):
    """A configuration value (file, flag, or field) failed validation."""


class ManifestError(ConfigError):
    """A dataset manifest is malformed; message carries line and field."""


class DataBoundsError(ValueError):
    """A frame index, clip window, or score is outside the valid range."""


class UndefinedCorrelationError(ValueError):
    """A correlation coefficient is undefined for the given inputs
    (constant axis or fewer than two samples)."""


class TapeConsumedError(RuntimeError):
    """backward() was called twice on the same tape."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf while finite checks were enabled."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt, or incompatible."""
