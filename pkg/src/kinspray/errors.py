"""Exception types raised by the simulator."""


class KinsprayError(Exception):
    """Base class for all simulator errors."""


class NonStochasticMatrix(KinsprayError):
    pass


class ReducibleChain(KinsprayError):
    pass


class NonFiniteTime(KinsprayError):
    pass


class NotCentered(KinsprayError):
    pass


class SingularBeyondKernel(KinsprayError):
    pass


class NoSpectralGap(KinsprayError):
    pass


class IndefiniteKernel(KinsprayError):
    pass


class GridMismatch(KinsprayError):
    pass


class ConsistencyFailure(KinsprayError):
    pass


class JumpStraddled(KinsprayError):
    pass


class CFLViolation(KinsprayError):
    pass


class ResolutionInsufficient(KinsprayError):
    pass


class NoConvergence(KinsprayError):
    pass


class StabilityViolation(KinsprayError):
    pass


class NonFiniteState(KinsprayError):
    pass


class InsufficientEnsemble(KinsprayError):
    pass


class ObservableMismatch(KinsprayError):
    pass


class ConfigError(KinsprayError):
    """Invalid or missing configuration (maps to CLI exit status 2)."""
