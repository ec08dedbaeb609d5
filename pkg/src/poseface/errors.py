"""Exception hierarchy shared by every poseface module."""


class PoseFaceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PoseFaceError, ValueError):
    pass


class NumericError(PoseFaceError, ArithmeticError):
    pass


class OutOfFrameError(PoseFaceError, ValueError):
    pass


class DegenerateError(PoseFaceError, ValueError):
    pass


class DegenerateColumnError(DegenerateError):
    pass


class DegenerateEmbeddingError(DegenerateError):
    pass


class DegenerateScoreError(DegenerateError):
    pass


class FoldError(PoseFaceError, ValueError):
    pass


class NotPretrainedError(PoseFaceError, RuntimeError):
    pass


class EmptyDatasetError(PoseFaceError, ValueError):
    pass


class SpecError(PoseFaceError, ValueError):
    pass


class FormatError(PoseFaceError, ValueError):
    """Malformed binary or text file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(PoseFaceError, ValueError):
    pass


class MissingArtifactError(PoseFaceError, FileNotFoundError):
    pass
