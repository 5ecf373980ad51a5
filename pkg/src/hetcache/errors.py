"""Exception types shared across the package."""


class HetCacheError(Exception):
    pass


class InvalidInputError(HetCacheError, ValueError):
    pass


class DegenerateReferenceError(HetCacheError, ZeroDivisionError):
    """The reference grid of a relative distance has zero L1 norm."""


class NumericFailureError(HetCacheError, FloatingPointError):
    def __init__(self, message, block=None, step=None):
        super().__init__(message)
        self.block = block
        self.step = step


class ConfigError(HetCacheError, ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
