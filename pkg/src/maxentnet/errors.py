"""Exception hierarchy shared by every module of the package."""


class MaxEntError(Exception):
    """Base class for all errors raised by maxentnet."""


class InvalidInput(MaxEntError, ValueError):
    """NaN/Inf or malformed arrays passed to a numerical routine."""


class RankDeficient(MaxEntError, ValueError):
    def __init__(self, rank, expected):
        super().__init__(f"matrix is rank deficient: numerical rank {rank}, expected {expected}")
        self.rank = rank
        self.expected = expected


class NotPositiveDefinite(MaxEntError, ValueError):
    pass


class DomainViolation(MaxEntError, ValueError):
    """A natural parameter left the admissible domain of its kind."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyInterval(MaxEntError, ValueError):
    pass


class BoundaryState(MaxEntError, ValueError):
    """A chain state touches the boundary of the prior support."""


class InfeasibleStart(MaxEntError, ValueError):
    pass


class OracleUnavailable(MaxEntError, ValueError):
    pass


class SupportViolation(MaxEntError, ValueError):
    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ReconstructionInfeasible(MaxEntError):
    """gamma inverse failed to converge at some layer of the backward path."""

    def __init__(self, layer, residual=None):
        msg = f"gamma inverse did not converge at layer {layer}"
        if residual is not None:
            msg += f" (residual {residual:.3g})"
        super().__init__(msg)
        self.layer = layer
        self.residual = residual


class TrainingDiverged(MaxEntError):
    def __init__(self, epoch, reason="loss is not finite"):
        super().__init__(f"training diverged at epoch {epoch}: {reason}")
        self.epoch = epoch
