"""Exception types raised by the solvers."""


class SolverError(RuntimeError):
    """Base class for numerical failures."""


class InvalidParameter(ValueError):
    pass


class SingularSliceSystem(SolverError):
    pass


class NanDetected(SolverError):
    def __init__(self, msg, t_index=None, s_index=None):
        super().__init__(msg)
        self.t_index = t_index
        self.s_index = s_index


class NewtonDivergence(SolverError):
    def __init__(self, msg, trace=None, t_index=None, s_index=None):
        super().__init__(msg)
        self.trace = list(trace or [])
        self.t_index = t_index
        self.s_index = s_index


class NoConvergence(SolverError):
    def __init__(self, msg, best=None, log=None):
        super().__init__(msg)
        self.best = best
        self.log = log


class BlowUp(SolverError):
    def __init__(self, msg, last_healthy_stage=None, log=None, partial=None):
        super().__init__(msg)
        self.last_healthy_stage = last_healthy_stage
        self.log = log
        self.partial = partial


class DomainError(ValueError):
    pass


class PositivityLost(SolverError):
    def __init__(self, msg, log=None):
        super().__init__(msg)
        self.log = log


class SeriesNotConverged(SolverError):
    pass


class SingularFundamentalMatrix(SolverError):
    pass


class HypothesisViolated(ValueError):
    pass


class NoNashConvergence(SolverError):
    def __init__(self, msg, last=None, residual=None):
        super().__init__(msg)
        self.last = last
        self.residual = residual


class CensorLimit(SolverError):
    def __init__(self, msg, censored=0, n=0):
        super().__init__(msg)
        self.censored = censored
        self.n = n


class ZeroPerturbation(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, msg, line=None, key=None):
        super().__init__(msg)
        self.line = line
        self.key = key
