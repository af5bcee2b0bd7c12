"""Bilevel optimization with a lower-level constrained problem, solved by a
gradient approximation method that handles the nonsmooth points of y*(x)."""
from .clarke import (
    BallClassification,
    SubgradientSet,
    build_subgradient_set,
    check_differentiability_on_ball,
    estimate_lipschitz,
    min_norm_element,
)
from .errors import *  # noqa: F401,F403
from .gam import GamConfig, GamResult, TraceRecord, line_search, run
from .lower import ActiveSetClassification, LowerSolution, SolverOpts, classify_active_sets, solve_lower
from .problem import BilevelProblem, EvalCache, ValidationReport, finite_difference_problem, validate_problem
from .problems import make_bilevel_qp, make_degenerate_qp, make_example1, make_hyperclean, make_svm_hyperopt, make_svm_toy
from .sensitivity import (
    DirectionalDerivative,
    KktSensitivity,
    directional_derivative,
    kkt_gradient,
    representative_gradient,
    solve_saddle_block,
)

__version__ = "0.1.0"
