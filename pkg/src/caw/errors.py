"""Exception hierarchy shared by every module."""


class CawError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CawError, ValueError):
    pass


class DomainError(CawError, ValueError):
    pass


class ContractError(CawError, RuntimeError):
    pass


class GraphConsumedError(ContractError):
    """backward() was called twice on the same graph."""


class NumericError(CawError, ArithmeticError):
    pass


class ConfigError(CawError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FileFormatError(CawError, IOError):
    """Base class for on-disk format problems."""


class CorruptHeaderError(FileFormatError):
    pass


class VersionMismatchError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class LengthMismatchError(FileFormatError):
    """Header-declared sizes disagree with the payload actually present."""


class ChecksumError(FileFormatError):
    pass
