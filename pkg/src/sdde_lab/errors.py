"""Exception hierarchy shared by all sdde_lab modules."""


class SDDEError(Exception):
    """Base class for every error raised by sdde_lab."""


class DomainError(SDDEError, ValueError):
    """A time or argument lies outside the domain of the operation."""


class CoefficientOverflow(SDDEError, ArithmeticError):
    """Drift or diffusion evaluated to a non-finite value."""


class StepFunctionError(SDDEError, ArithmeticError):
    """The step-size function returned a non-finite value."""


class NonCommensurateDelay(SDDEError, ValueError):
    """The delay is not an integer multiple of the fixed step."""


class InvalidClampBound(SDDEError, ValueError):
    """Clamp radius does not exceed the sup-norm of the initial segment."""


class DegenerateFit(SDDEError, ValueError):
    """Least-squares fit is undetermined (e.g. all abscissae equal)."""


class ExplodedTrajectory(SDDEError, ValueError):
    """Statistic requested from a trajectory that exploded."""


class InsufficientTail(SDDEError, ValueError):
    """Too few grid points in the requested tail window."""


class ConfigError(SDDEError, ValueError):
    """Invalid run configuration."""
