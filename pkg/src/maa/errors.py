"""Exception types shared across the package."""


class MAAError(Exception):
    """Base class for all package errors."""


class ShapeError(MAAError, ValueError):
    pass


class NumericError(MAAError, FloatingPointError):
    """A non-finite value showed up; the message names the op that produced it."""


class DegenerateRowError(NumericError):
    pass


class ProbeError(NumericError):
    pass


class EmptyMaskError(MAAError, ValueError):
    pass


class ValidationError(MAAError, ValueError):
    pass


class FormatError(MAAError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LengthError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass
