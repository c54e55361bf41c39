"""Exception hierarchy used across the package."""


class P1FlowError(Exception):
    """Base class for all errors raised by p1flow."""


class InvalidArgument(P1FlowError, ValueError):
    pass


class UnsupportedFormat(P1FlowError):
    pass


class UnsupportedElement(P1FlowError):
    pass


class MalformedMesh(P1FlowError):
    pass


class DegenerateCell(P1FlowError):
    pass


class PatternViolation(P1FlowError):
    pass


class ConflictingBC(P1FlowError):
    pass


class SingularSystem(P1FlowError):
    pass


class LinearSolveFailure(P1FlowError):
    pass


class NonConvergence(P1FlowError):
    """Newton iteration hit its iteration cap.

    The partially converged state and the iteration report are attached so
    callers can inspect or dump them.
    """

    def __init__(self, message, state=None, report=None):
        super().__init__(message)
        self.state = state
        self.report = report


class OutOfDomain(P1FlowError, ValueError):
    pass


class UnknownRegion(P1FlowError, KeyError):
    pass


class ConfigError(P1FlowError):
    """Case configuration failed validation; ``problems`` lists diagnostics."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
