"""Exception hierarchy shared by every module."""


class SocprobError(Exception):
    """Base class for all library errors."""


class DimensionError(SocprobError, ValueError):
    """Shapes or grid specs do not line up."""


class NumericError(SocprobError, ArithmeticError):
    """A non-finite value appeared where finite input was required."""


class ParseError(SocprobError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(SocprobError, ValueError):
    """Well-formed input with inconsistent content (duplicates, misaligned frames)."""


class ConfigError(SocprobError, ValueError):
    pass


class DecodeError(SocprobError):
    """A probability map carries no positive mass to decode from."""


class CheckpointFormatError(SocprobError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointTruncatedError(SocprobError, OSError):
    pass
