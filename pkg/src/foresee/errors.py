"""Exception hierarchy shared by every layer of the package."""


class ForeseeError(Exception):
    """Base class for all package errors."""


class NumericalError(ForeseeError):
    """A numerical routine could not produce a trustworthy result."""


class NotPSD(NumericalError):
    """Covariance could not be factorized even after jitter escalation."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class DegenerateVariance(NumericalError):
    pass


class NonPositiveShape(NumericalError):
    pass


class CoincidentAgents(NumericalError):
    pass


class PolicyDomainError(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteRow(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class Infeasible(NumericalError):
    pass


class QpInfeasible(Infeasible):
    """CBF-QP has an empty feasible set.

    ``certificate`` holds the indices of constraint rows that could not be
    satisfied simultaneously (the last active set tried by the solver).
    """

    def __init__(self, message, certificate=()):
        super().__init__(message)
        self.certificate = tuple(certificate)


class DegenerateActiveSet(NumericalError):
    pass


class InfeasiblePrefix(ForeseeError):
    """A constraint is violated before the terminal prediction step."""

    def __init__(self, message, first_violation, diagnostics=None):
        super().__init__(message)
        self.first_violation = first_violation
        self.diagnostics = diagnostics or {}


class NoConvergence(ForeseeError):
    pass


class ConfigError(ForeseeError):
    pass
