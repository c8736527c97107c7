"""Exception hierarchy.

Every error carries structured fields next to its message so callers (and the
CLI) can report the offending key, dimension or file without parsing text.
"""


class IncresError(Exception):
    """Base class for all package errors."""


class ShapeError(IncresError, ValueError):
    def __init__(self, message, **dims):
        super().__init__(message)
        self.dims = dims


class ConfigError(IncresError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(IncresError, ValueError):
    def __init__(self, message, path=None, line=None):
        super().__init__(message)
        self.path = path
        self.line = line


class CheckpointError(IncresError):
    def __init__(self, message, path=None, mismatches=None):
        super().__init__(message)
        self.path = path
        self.mismatches = list(mismatches or [])


class NonFiniteError(IncresError, FloatingPointError):
    """A loss or gradient became NaN/Inf."""

    def __init__(self, message, param=None, epoch=None, batch=None):
        super().__init__(message)
        self.param = param
        self.epoch = epoch
        self.batch = batch
