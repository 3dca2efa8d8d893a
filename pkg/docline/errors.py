import typing as t


class DoclineError(Exception):
    """Base class for every error raised on purpose by docline."""

    exit_code: int = 1


class UsageError(DoclineError):
    exit_code = 1


class DataError(DoclineError):
    exit_code = 2


class OcrFormatError(DataError):
    pass


class BBoxError(DataError):
    pass


class TokenizerError(DataError):
    pass


class CorpusError(DataError):
    pass


class ConfigMismatchError(DataError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(DoclineError):
    """Non-finite values in a loss, gradient or finite difference.

    `report` holds the loss report of the offending training step when there is one.
    """

    exit_code = 3

    def __init__(self, message: str, report: t.Optional[t.Any] = None) -> None:
        super().__init__(message)
        self.report = report
