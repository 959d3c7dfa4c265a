"""Exception hierarchy.

Every error carries a stable ``exit_code`` used by the command line runner.
"""


class XTransferError(Exception):
    exit_code = 1


class ConfigError(XTransferError, ValueError):
    exit_code = 2


class ShapeError(XTransferError, ValueError):
    exit_code = 4


class SegmentationError(XTransferError, ValueError):
    exit_code = 5


class GenerationError(XTransferError, RuntimeError):
    exit_code = 6

    def __init__(self, message, score=None):
        super().__init__(message)
        self.score = score

    def __reduce__(self):
        return type(self), (str(self), self.score)


class EmptyInputError(XTransferError, ValueError):
    exit_code = 7


class DegenerateClusteringError(XTransferError, ValueError):
    exit_code = 8


class DegenerateScaleError(XTransferError, ValueError):
    exit_code = 9


class DegenerateRotationError(XTransferError, ValueError):
    exit_code = 10


class PairingError(XTransferError, ValueError):
    exit_code = 11


class RepairDivergenceError(XTransferError, RuntimeError):
    exit_code = 12

    def __init__(self, message, episode):
        super().__init__(message)
        self.episode = episode

    def __reduce__(self):
        return type(self), (str(self), self.episode)


class DegenerateRateError(XTransferError, ValueError):
    exit_code = 13


class SearchBudgetExhausted(XTransferError, RuntimeError):
    exit_code = 14

    def __init__(self, message, state=None, trace=None):
        super().__init__(message)
        self.state = state
        self.trace = trace or []

    def __reduce__(self):
        return type(self), (str(self), self.state, self.trace)


class EmptySearchResult(XTransferError, RuntimeError):
    exit_code = 15

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []

    def __reduce__(self):
        return type(self), (str(self), self.trace)


class DegenerateMetricError(XTransferError, ValueError):
    exit_code = 16


class IntegrityError(XTransferError, RuntimeError):
    exit_code = 17


# exit code for missing/unwritable files (OSError); kept here so the table is in one place
IO_EXIT_CODE = 3

EXIT_CODES = {
    cls.__name__: cls.exit_code
    for cls in (
        XTransferError, ConfigError, ShapeError, SegmentationError, GenerationError,
        EmptyInputError, DegenerateClusteringError, DegenerateScaleError,
        DegenerateRotationError, PairingError, RepairDivergenceError, DegenerateRateError,
        SearchBudgetExhausted, EmptySearchResult, DegenerateMetricError, IntegrityError,
    )
}
EXIT_CODES["OSError"] = IO_EXIT_CODE
