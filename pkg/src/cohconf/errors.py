"""Exception hierarchy shared by every module."""

from __future__ import annotations


class CohConfError(Exception):
    """Base class for all library errors."""


class DataError(CohConfError):
    """Malformed or inconsistent input data (CLI exit code 2)."""


class CycleDetected(DataError):
    def __init__(self, node: int, problem_id: str = ""):
        self.node = node
        self.problem_id = problem_id
        where = f" in problem {problem_id!r}" if problem_id else ""
        super().__init__(f"cycle detected through claim {node}{where}")


class InvalidEdgeEndpoint(DataError):
    pass


class UnknownClaimId(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class MissingFrequency(DataError):
    pass


class EmptyRisks(DataError):
    pass


class EmptyScores(DataError):
    pass


class EmptyValues(DataError):
    pass


class EmptyClass(DataError):
    pass


class TooFewProblems(DataError):
    pass


class ParseError(DataError):
    pass


class ValidationError(DataError):
    def __init__(self, problem_id: str, reason: str):
        self.problem_id = problem_id
        super().__init__(f"problem {problem_id!r}: {reason}")


class IoError(DataError):
    pass


class InvalidConfig(CohConfError):
    pass


class NumericError(CohConfError):
    """Non-finite values in a numerical pipeline (CLI exit code 3)."""


class NonFiniteValue(NumericError):
    pass


class NonFiniteGradient(NumericError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite training loss at epoch {epoch}")


class DegenerateWeights(NumericError):
    pass


class InsufficientVariance(NumericError):
    pass
