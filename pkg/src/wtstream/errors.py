"""Exception hierarchy shared by every subsystem.

Each class carries the HTTP status the REST layer maps it to, so the service
never needs a per-route translation table.
"""


class WtError(Exception):
    status_code = 400

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.__class__.__name__)
        self.details = details


class NotFoundError(WtError):
    status_code = 404


class ConflictError(WtError):
    status_code = 409


# streams / ingestion
class InvalidId(WtError, ValueError):
    pass


class DuplicateStream(ConflictError):
    pass


class UnknownStream(NotFoundError):
    pass


class NonFiniteValue(WtError, ValueError):
    pass


class ParseError(WtError, ValueError):
    def __init__(self, message: str = "", line: int | None = None, **details):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **details)
        self.line = line


class WrongStreamKind(WtError):
    pass


class SubscriberOverflow(WtError):
    pass


# repository
class DanglingReference(WtError, ValueError):
    pass


class InvalidMetadata(WtError, ValueError):
    pass


class ClosedStream(ConflictError):
    pass


class BadRange(WtError, ValueError):
    pass


# windowing
class UnknownRule(NotFoundError):
    pass


class DuplicateRule(ConflictError):
    pass


class DuplicateIndex(ConflictError):
    pass


class BadWindow(WtError, ValueError):
    pass


# metrics
class MetricsError(WtError, ValueError):
    pass


class LengthMismatch(MetricsError):
    pass


class EmptySeries(MetricsError):
    pass


class ConstantObserved(MetricsError):
    pass


class UndefinedMetric(MetricsError):
    pass


class DegenerateDenominator(MetricsError):
    pass


class LagTooLarge(MetricsError):
    pass


class ConstantSeries(MetricsError):
    pass


# ann
class BadConfig(WtError, ValueError):
    pass


class ArityMismatch(WtError, ValueError):
    pass


class EmptyDataset(WtError, ValueError):
    pass


class DivergenceDetected(WtError, ArithmeticError):
    pass


class NonConvergenceWarning(UserWarning):
    pass


# scheduler
class BadArchive(WtError, ValueError):
    pass


class DuplicateModel(ConflictError):
    pass


class UnknownModel(NotFoundError):
    pass


class DuplicateEngine(ConflictError):
    pass


class UnknownEngine(NotFoundError):
    pass


class InvalidSchedule(WtError, ValueError):
    pass


class AlreadyRunning(ConflictError):
    pass


class NotRunning(ConflictError):
    pass


class IncompleteInputs(ConflictError):
    pass


class StaleCycle(ConflictError):
    pass


class ExecutorFailure(WtError):
    status_code = 500


# notification
class BadRule(WtError, ValueError):
    pass


# weather source
class TransportError(WtError):
    status_code = 502


class BadStatus(WtError):
    status_code = 502
