"""Exception types shared across the package."""


class BoxlabError(Exception):
    pass


class BudgetExceeded(BoxlabError):
    pass


class InvalidShape(BoxlabError, ValueError):
    pass


class InsufficientRange(BoxlabError):
    pass


class NonCertifiableTail(BoxlabError):
    pass


class QuadratureFailure(BoxlabError):
    def __init__(self, msg, panels=None):
        super().__init__(msg)
        self.panels = panels


class ReductionDiverged(BoxlabError):
    pass


class DimensionMismatch(BoxlabError, ValueError):
    pass


class TruncationOverflow(BoxlabError):
    pass


class NearSingularC(BoxlabError, ValueError):
    pass


class TruncationBudget(BoxlabError):
    pass


class FloorViolation(BoxlabError):
    pass


class PrecisionExhausted(BoxlabError):
    pass


class PreconditionViolated(BoxlabError):
    pass


class ConfigInvalid(BoxlabError, ValueError):
    def __init__(self, msg, field=None):
        super().__init__(msg)
        self.field = field


class EmptyLedger(BoxlabError):
    pass
