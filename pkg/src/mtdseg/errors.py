"""Exception hierarchy. Each top-level family maps to a distinct CLI exit code."""


class MtdsegError(Exception):
    exit_code = 1


class ConfigurationError(MtdsegError):
    exit_code = 2


class DataError(MtdsegError):
    exit_code = 3


class IngestionError(DataError):
    pass


class EvaluationError(DataError):
    pass


class ReportError(DataError):
    pass


class NumericFaultError(MtdsegError):
    exit_code = 4


class WeightsError(MtdsegError):
    """Teacher or backbone weights could not be resolved."""

    exit_code = 5


class IntegrityError(WeightsError):
    pass


class ContractViolation(ValueError):
    """Caller broke a shape/bounds precondition. Programming error, not user input."""
