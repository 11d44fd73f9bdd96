"""Continuation values, worst-case beliefs and pricing for robust decision makers."""
from __future__ import annotations

from .ddc import DDCModel, solve_ddc
from .errors import RobustDMError
from .ident import local_ident_matrix, rho_derivatives, underident_construct_check
from .learning import LearnPrefs, solve_v_learn
from .models import ARGModel, LGModel, MoEModel, RegimeModel, StateSpaceModel, UtilityGrowth
from .numgrid import GaussHermiteRule, Grid, GridFn
from .pricing import chernoff_entropy, detection_error, euler_residual, strip_term_structure
from .robust import (Distortion, Preferences, SolverOptions, continuation_entropy, lg_closed_form, solve,
                     solve_v, subgradient_radius)

__all__ = [
    "ARGModel", "DDCModel", "Distortion", "GaussHermiteRule", "Grid", "GridFn", "LGModel", "LearnPrefs",
    "MoEModel", "Preferences", "RegimeModel", "RobustDMError", "SolverOptions", "StateSpaceModel",
    "UtilityGrowth", "chernoff_entropy", "continuation_entropy", "detection_error", "euler_residual",
    "lg_closed_form", "local_ident_matrix", "rho_derivatives", "solve", "solve_ddc", "solve_v",
    "solve_v_learn", "strip_term_structure", "subgradient_radius", "underident_construct_check",
]
