"""Exception hierarchy shared by all modules."""


class TwoPhaseError(Exception):
    """Base class for every numeric or input failure raised by the package."""


class InputError(TwoPhaseError, ValueError):
    """Malformed or inconsistent input data."""


class SingularDesign(TwoPhaseError):
    pass


class Separation(TwoPhaseError):
    """Coefficients diverged past the separation cap.

    The last iterate is kept on ``theta`` so callers that only need fitted
    probabilities (which saturate gracefully) can still use it.
    """

    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class NoVariation(TwoPhaseError):
    pass


class NonConvergence(TwoPhaseError):
    def __init__(self, message, theta=None):
        super().__init__(message)
        self.theta = theta


class SingularJacobian(TwoPhaseError):
    pass


class SingularWeightMatrix(TwoPhaseError):
    pass


class DomainError(TwoPhaseError, ValueError):
    pass


class BracketFailure(TwoPhaseError):
    pass


class EmptyStratum(TwoPhaseError):
    pass


class ZeroWeightProbability(TwoPhaseError):
    pass


class SingularInformation(TwoPhaseError):
    pass


class DegenerateSE(TwoPhaseError):
    pass
