"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A NaN/inf input or an invalid domain (log of a nonpositive value, ...)."""


class ConfigError(ValueError):
    """An invalid configuration value."""


class ParseError(ValueError):
    """Malformed input file."""


class ValidationError(ValueError):
    """Well-formed input whose values violate a domain invariant."""


class CorruptionError(IOError):
    """Checkpoint files are truncated, inconsistent or fail their checksum."""


class VersionError(IOError):
    """Checkpoint or report written with an unsupported format version."""


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given labels (e.g. AUC with one class)."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or broke a step invariant."""

    def __init__(self, message, step=None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace
