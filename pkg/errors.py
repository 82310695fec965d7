"""Error types shared across dimemo modules.

Every error carries an ``error_class`` string that the command line prints
as the machine-parsable prefix of its one-line failure message.
"""

from typing import Optional


class DimemoError(Exception):
    """Base class for toolkit errors."""

    error_class = "dimemo"


class InvalidArgumentError(DimemoError, ValueError):
    """Raised when an argument violates an operation precondition."""

    error_class = "invalid-argument"


class CorpusFormatError(DimemoError, ValueError):
    """Raised when a corpus file is malformed or violates an invariant."""

    error_class = "corpus-format"

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        location = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{location}: {message}")


class DimMismatchError(DimemoError, ValueError):
    """Raised when feature dimensions disagree."""

    error_class = "dim-mismatch"


class LengthMismatchError(DimemoError, ValueError):
    """Raised when sequence lengths disagree."""

    error_class = "length-mismatch"


class StreamFormatError(DimemoError, ValueError):
    """Raised when a feature-stream file cannot be decoded."""

    error_class = "stream-format"


class ModelFormatError(DimemoError, ValueError):
    """Raised when a model file is truncated or inconsistent."""

    error_class = "model-format"


class DegenerateStatisticError(DimemoError, ArithmeticError):
    """Raised when a statistic is undefined for the given data."""

    error_class = "degenerate-statistic"


class TrainingDivergedError(DimemoError):
    """Raised when the training loss becomes non-finite."""

    error_class = "training-diverged"

    def __init__(self, epoch: int, message: str):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")
