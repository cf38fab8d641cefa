"""Exception types shared across the package.

The CLI maps the three top-level families onto exit codes: ``ConfigError`` -> 2,
``DataError`` -> 3, ``NumericFault`` -> 4.
"""


class HsemisError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(HsemisError, ValueError):
    pass


class DataError(HsemisError, ValueError):
    pass


class NumericFault(HsemisError, ArithmeticError):
    """A NaN or infinity appeared at an operation boundary."""


class ShapeError(HsemisError, ValueError):
    pass


class BackwardStateError(HsemisError, RuntimeError):
    """Raised when backward is replayed on a tape that was already consumed."""


class NotTrainedError(HsemisError, RuntimeError):
    pass


class DegenerateMaskError(HsemisError, ValueError):
    pass


class EncodingError(HsemisError, ValueError):
    pass


class NormalizationError(HsemisError, ValueError):
    pass


class DomainError(HsemisError, ValueError):
    pass


class FormatError(DataError):
    pass


class StratificationError(DataError):
    pass


class StageError(HsemisError, RuntimeError):
    """Wraps a failure inside one pipeline stage, recording which one."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
