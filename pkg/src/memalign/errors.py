"""Exception hierarchy.

Each class carries the process exit code the CLI maps it to.
"""


class MemalignError(Exception):
    exit_code = 2


class ConfigError(MemalignError, ValueError):
    """Invalid configuration, arguments or incompatible shapes."""

    exit_code = 1


class ShapeError(ConfigError):
    pass


class NumericError(MemalignError, ArithmeticError):
    """NaN/Inf encountered during evaluation or training."""

    exit_code = 2


class ArchiveError(MemalignError):
    """Malformed embedding archive. ``offset`` is the byte position of the fault."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StorageError(MemalignError, OSError):
    exit_code = 3
