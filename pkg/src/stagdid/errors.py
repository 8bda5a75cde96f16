"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`StagDidError`
so callers (the CLI in particular) can map them to exit codes.
"""


class StagDidError(Exception):
    """Base class for all package errors."""


class PanelError(StagDidError, ValueError):
    """The input panel violates a structural requirement."""


class UnbalancedPanel(PanelError):
    pass


class TreatmentReversal(PanelError):
    pass


class TreatedAtBaseline(PanelError):
    pass


class CovariateDrift(PanelError):
    pass


class MixedClusterTreatment(PanelError):
    pass


class MissingValue(PanelError):
    pass


class InvalidTime(PanelError):
    pass


class NoTreatedUnits(PanelError):
    pass


class EmptyWindow(StagDidError, ValueError):
    pass


# numerical kernels


class KernelError(StagDidError, ArithmeticError):
    pass


class RankZero(KernelError):
    pass


class FewerClustersThanTwo(KernelError):
    pass


class NonConvergence(KernelError):
    pass


class SingleClass(KernelError):
    pass


class MissingClass(KernelError):
    pass


class QuasiSeparation(KernelError):
    """Fitted probabilities hit the boundary.

    The capped fit is attached as ``model`` so callers can inspect it; it is
    flagged ``usable_for_ipw = False``.
    """

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model


# estimators


class EstimationError(StagDidError):
    pass


class EmptyControlSet(EstimationError):
    pass


class OverlapViolation(EstimationError):
    pass


class NoReferenceCohort(EstimationError):
    pass


class NoContributingCohort(EstimationError):
    pass


class InsufficientUntreatedSupport(EstimationError):
    pass


class NoTreatedRows(EstimationError):
    pass


class EmptyEventTime(EstimationError):
    pass


class NegativeEventTime(EstimationError, ValueError):
    pass


class MissingCell(EstimationError):
    pass


class NoFeasibleCohort(EstimationError):
    pass


class AllCellsMissing(EstimationError):
    pass


class TooFewClusters(EstimationError):
    pass


class AllReplicatesFailed(EstimationError):
    pass


class UnsupportedEstimand(StagDidError, ValueError):
    pass


# simulation / configuration


class UnknownScenario(StagDidError, ValueError):
    pass


class ConfigError(StagDidError, ValueError):
    """Invalid configuration; ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
