"""Exception types raised across the pipeline."""


class SegError(Exception):
    """Base class; ``code`` is the machine-readable kind used in CLI error JSON."""

    code = "error"


class InvalidArgument(SegError, ValueError):
    code = "invalid-argument"


class InvalidTrainingSet(SegError, ValueError):
    code = "invalid-training-set"


class NumericFailure(SegError, ArithmeticError):
    code = "numeric-failure"


class NoCandidate(SegError):
    code = "no-candidate"


class UndefinedMetric(SegError, ValueError):
    code = "undefined-metric"


class DegenerateTest(SegError, ValueError):
    code = "degenerate-test"


class FormatError(SegError):
    code = "format-error"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
