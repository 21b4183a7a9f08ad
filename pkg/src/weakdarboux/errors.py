"""Exception taxonomy.

Every error carries a machine readable ``code`` and an optional ``location``
(usually a node index or a coordinate pair) so that batch front ends can
report it without parsing messages.
"""


class DarbouxError(Exception):
    """Base class for all package errors."""

    code = "error"

    def __init__(self, message, location=None, code=None):
        super().__init__(message)
        self.message = message
        self.location = location
        if code is not None:
            self.code = code

    def to_dict(self):
        loc = self.location
        if loc is not None:
            loc = [float(v) if not isinstance(v, (int, str)) else v for v in loc]
        return {"code": self.code, "message": self.message, "location": loc}


class HypothesisViolation(DarbouxError):
    """A mathematical hypothesis of the theory fails for the given input."""

    code = "hypothesis-violation"


class SPDError(HypothesisViolation):
    code = "spd"


class MarginViolation(HypothesisViolation):
    """``|du|_g`` reaches 1 (or the configured margin) somewhere."""

    code = "margin"


class NotFlatError(HypothesisViolation):
    code = "not-flat"


class NumericalFailure(DarbouxError):
    """The computation broke down (resolution, conditioning, iteration)."""

    code = "numerical-failure"


class ChartError(NumericalFailure):
    code = "chart-failure"


class InversionError(NumericalFailure):
    code = "newton-failure"


class SweepError(NumericalFailure):
    code = "sweep-failure"


class GridError(NumericalFailure):
    code = "grid"


class EvaluationDomainError(DarbouxError):
    """An expression was evaluated outside its domain (log of 0, sqrt of -1)."""

    code = "domain-error"


class ConfigError(DarbouxError):
    code = "config-error"
