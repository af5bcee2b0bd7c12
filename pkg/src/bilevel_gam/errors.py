"""Exception hierarchy shared by every solver stage."""


class GamError(Exception):
    """Base class for all library errors."""


class DimensionError(GamError, ValueError):
    pass


class EvaluationError(GamError):
    """A problem callback returned NaN/inf or something unusable."""


class InfeasibleLowerLevel(GamError):
    pass


class MaxIterations(GamError):
    """The lower-level solver ran out of iterations.

    The last iterate is attached as ``solution`` (with ``converged=False``).
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class LicqViolation(GamError):
    pass


class ScscViolated(GamError):
    pass


class SingularKktMatrix(GamError):
    pass


class CgStalled(GamError):
    pass


class SingularSchur(SingularKktMatrix):
    pass


class AllSubsetsSingular(GamError):
    pass


class LineSearchFailed(GamError):
    def __init__(self, message, armijo_gap=None, t_min=None):
        super().__init__(message)
        self.armijo_gap = armijo_gap
        self.t_min = t_min


class SamplingExhausted(GamError):
    pass


class DegenerateKernel(GamError):
    pass


class ConfigError(GamError, ValueError):
    pass
