from .constants import ExitCode


class CanonError(Exception):
    """
    Base error; carries the exit status the CLI should report for it.
    """

    status: int = ExitCode.data

    def __init__(self, error: str, status: int | None = None):
        super().__init__(error)
        self.error = error
        if status is not None:
            self.status = status


class UsageError(CanonError):
    """
    Bad flags, unknown config keys or invalid config values.
    """

    status = ExitCode.usage


class DataError(CanonError):
    """
    Anything wrong with the data itself.
    """

    status = ExitCode.data


class MeshFormatError(DataError):
    def __init__(self, error: str, line: int | None = None):
        self.line = line
        if line is not None:
            error = f"line {line}: {error}"
        super().__init__(error)


class DegenerateShapeError(DataError):
    pass


class BasisMismatchError(DataError):
    def __init__(self, expected: str | None, got: str | None):
        self.expected = expected
        self.got = got
        super().__init__(f"basis mismatch: expected {expected}, got {got}")


class SolverError(DataError):
    pass


class TrainingDivergedError(DataError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"loss became {loss} at epoch {epoch}")


class ManifestError(DataError):
    pass


class ExtractionError(DataError):
    pass
