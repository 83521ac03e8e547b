"""Exception hierarchy shared by all qmixlab modules."""


class QmixError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(QmixError):
    """An operand has an incompatible shape; the message names the offending dimension."""


class TapeError(QmixError):
    """Backward requested on an empty, unclosed, or already-consumed tape."""


class NumericsError(QmixError):
    """A forward pass produced a non-finite value where finiteness is required."""


class ParseError(QmixError):
    """Architecture text could not be parsed; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class BuildError(QmixError):
    """A layer or model could not be constructed from the given configuration."""


class SurgeryError(QmixError):
    """A surgery plan is invalid for the target graph."""


class TrainError(QmixError):
    """Training aborted; carries the offending epoch index when known."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch
