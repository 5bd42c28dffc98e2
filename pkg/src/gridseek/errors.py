"""Exception hierarchy shared across gridseek modules."""


class GridseekError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GridseekError, ValueError):
    pass


class DomainError(GridseekError, ValueError):
    pass


class DegenerateEmbeddingError(DomainError):
    pass


class TapeError(GridseekError, RuntimeError):
    pass


class NumericError(GridseekError, FloatingPointError):
    """A parameter, gradient or loss became NaN/Inf."""


class CheckpointError(GridseekError, ValueError):
    pass


class IndexFormatError(GridseekError, ValueError):
    pass


class ConfigError(GridseekError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(GridseekError, OSError):
    pass


class ImageError(GridseekError, ValueError):
    pass
