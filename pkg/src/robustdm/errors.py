"""Exception hierarchy shared by the solvers."""


class RobustDMError(Exception):
    """Base class for all toolkit errors."""


class DomainEvaluationError(RobustDMError, ValueError):
    """A function was evaluated at a point where it is not finite."""


class DivergenceError(RobustDMError):
    """A Neumann-type series failed to decay (spectral radius >= 1)."""


class NonConvergenceError(RobustDMError):
    """An iteration stalled above its tolerance after max_iters."""


class NumericalFailureError(RobustDMError):
    """An invariant of the iteration (e.g. monotone descent) was broken."""


class AssumptionViolationError(RobustDMError):
    """A thin-tail / integrability proxy check failed."""


class MGFDomainError(RobustDMError, ValueError):
    """Moment generating function evaluated outside its domain."""


class FilterDegeneracyError(RobustDMError):
    """All emission densities vanished at an observation."""


class AbsoluteContinuityError(RobustDMError):
    """A density ratio was requested where one of the densities is zero."""


class ModelSpecError(RobustDMError, ValueError):
    """Model parameters violate the model's invariants."""


class ConfigError(RobustDMError, ValueError):
    """Run configuration failed validation."""
