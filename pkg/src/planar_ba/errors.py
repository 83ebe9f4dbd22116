"""Exception types raised across the package."""


class PBAError(Exception):
    """Base class for all planar bundle adjustment errors."""


class DegeneratePlane(PBAError, ValueError):
    """A plane passes through (or numerically at) the coordinate origin."""


class DegenerateFit(PBAError, ValueError):
    """Points are collinear or coincident, so no unique plane fits them."""


class SingularSystem(PBAError, ArithmeticError):
    """The Schur-reduced damped system is not positive definite."""


class DivergedNaN(PBAError, FloatingPointError):
    """The cost became non-finite during optimization."""


class InfeasibleScene(PBAError, RuntimeError):
    """A synthetic scene leaves some pose underconstrained."""


class LengthMismatch(PBAError, ValueError):
    """Two trajectories that must be paired have different lengths."""
