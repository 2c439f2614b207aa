"""Exception hierarchy shared by the estimator, readers and CLI."""

from pathlib import Path
from typing import Optional, Union


class OdometryError(Exception):
    """Base class for every recoverable failure raised by msodom."""


class ConfigError(OdometryError):
    """Invalid or incomplete estimator configuration."""

    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"config [{key}]: {message}")
        self.key = key


class DatasetError(OdometryError):
    """Dataset files are missing or structurally corrupt."""


class ParseError(DatasetError):
    def __init__(self, path: Union[str, Path], line: int, message: str) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = Path(path)
        self.line = line


class OrderingError(DatasetError):
    """Timestamps are not strictly increasing."""


class MissingFileError(DatasetError):
    def __init__(self, path: Union[str, Path], reason: Optional[str] = None) -> None:
        msg = f"missing dataset file: {path}"
        if reason:
            msg += f" ({reason})"
        super().__init__(msg)
        self.path = Path(path)


class GeometryError(OdometryError):
    """Degenerate camera geometry."""


class BehindCameraError(GeometryError):
    pass


class InvalidDepthError(GeometryError):
    pass


class NoTriangulationError(GeometryError):
    """Baseline or parallax too small, or the solution lies behind the camera."""


class InsufficientDataError(OdometryError):
    pass


class LinearizationError(OdometryError):
    """Too many factors failed to evaluate at the current linearization point."""


class IndefiniteSystemError(OdometryError):
    """The damped normal equations could not be factorized."""


class ModeError(OdometryError):
    """Operation not available in the configured sensor mode."""


class EvaluationError(OdometryError):
    pass


class AlignmentError(EvaluationError):
    pass


class OracleError(OdometryError):
    """A numerical oracle evaluated to a non-finite value."""


class TrajectoryRangeError(OdometryError):
    pass
