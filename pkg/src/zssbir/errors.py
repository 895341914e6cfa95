"""Exception hierarchy shared across the package."""


class ZssbirError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(ZssbirError, ValueError):
    pass


class DomainError(ZssbirError, ValueError):
    pass


class NumericError(ZssbirError, ArithmeticError):
    pass


class ContractError(ZssbirError, RuntimeError):
    pass


class ConfigError(ZssbirError, ValueError):
    pass


class DataError(ZssbirError, ValueError):
    pass


class ParseError(DataError):
    """Malformed feature file. ``offset`` is the byte position of the failure."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(ZssbirError, ValueError):
    pass
