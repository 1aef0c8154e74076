"""Exception types. Each carries the process exit code the CLI maps it to."""


class ArtifactError(Exception):
    exit_code = 4


class ValidationError(ArtifactError, ValueError):
    exit_code = 2


class HypothesisViolated(ArtifactError):
    exit_code = 3


class OrthogonalityViolated(ArtifactError):
    pass


class SingularSystem(ArtifactError):
    pass


class NoPositiveEigenvalue(ArtifactError):
    pass


class IntegralDivergence(ArtifactError):
    pass


class OrderingLost(ArtifactError):
    def __init__(self, msg, t=None):
        super().__init__(msg)
        self.t = t


class StepUnderflow(ArtifactError):
    pass


class DegenerateFit(ArtifactError):
    pass


class DecayViolated(ArtifactError):
    pass


class TailUnclosable(ArtifactError):
    pass


class BlowupDetected(ArtifactError):
    def __init__(self, msg, t=None, sup=None):
        super().__init__(msg)
        self.t = t
        self.sup = sup


class FitFailed(ArtifactError):
    pass


class UnstableGrowth(ArtifactError):
    pass
