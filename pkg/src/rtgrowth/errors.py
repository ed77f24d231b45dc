"""Exception types raised by the rtgrowth pipeline."""


class RTGrowthError(Exception):
    """Base class for all package errors."""


class ConfigError(RTGrowthError):
    """Run configuration is malformed or references missing files."""


class NonPositiveDensity(RTGrowthError):
    """Density profile is not strictly positive on the domain."""


class NoValidConstant(RTGrowthError):
    """No integration constant achieves the requested internal-energy floor."""


class BadExtents(RTGrowthError):
    """Box extents are degenerate or reversed."""


class TooFewCells(RTGrowthError):
    """Mesh needs at least two cells per axis."""


class DimensionMismatch(RTGrowthError):
    """Coefficient vector does not match the space it is used with."""


class MeshMismatch(RTGrowthError):
    """Operands were built on different meshes."""


class ProfileDomainMismatch(RTGrowthError):
    """Steady profile does not cover the mesh's vertical extent."""


class SingularSystem(RTGrowthError):
    """A linear system that should be definite failed to factorize."""


class EigensolverStall(RTGrowthError):
    """Eigenvalue iteration hit its cap without converging."""


class NotUnstable(RTGrowthError):
    """Profile has no growing mode: the energy maximum at zero damping is nonpositive."""

    def __init__(self, alpha0: float):
        self.alpha0 = alpha0
        super().__init__(f"no growing mode: alpha(0) = {alpha0:.6g} <= 0")


class BracketFailure(RTGrowthError):
    """Could not bracket a sign change for the fixed-point solve."""


class NoUnstableRegion(RTGrowthError):
    """Profile has no region of increasing density to support a buoyant test field."""


class DegenerateMode(RTGrowthError):
    """Reconstructed mode has vanishing velocity."""


class PenaltyNonconvergence(RTGrowthError):
    """Divergence-penalty schedule exhausted without the rate stabilizing."""


class LinearSolveFailure(RTGrowthError):
    """Implicit step did not reach the requested residual."""


class WrongProfileClass(RTGrowthError):
    """Operation requires a different profile classification."""


class PicardDivergence(RTGrowthError):
    """Compatibility iteration stopped contracting."""

    def __init__(self, delta: float, factor: float):
        self.delta = delta
        self.factor = factor
        super().__init__(
            f"compatibility iteration diverged at delta={delta:.3g} "
            f"(contraction factor {factor:.3g} >= 1)"
        )


class PositivityLoss(RTGrowthError):
    """Total density or internal energy would become nonpositive."""


class CFLViolation(RTGrowthError):
    """Requested time step exceeds the advective/viscous stability bound."""


class InsufficientGrowth(RTGrowthError):
    """Trajectory grew too little for a reliable rate fit."""


class NoEscape(RTGrowthError):
    """Perturbation did not reach the escape threshold before t_max."""

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)
