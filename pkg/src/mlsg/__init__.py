"""Multilevel stochastic gradient methods for elliptic optimal control under uncertainty."""

from .estimators import (
    LevelStats,
    MlmcOutput,
    fit_rate_constant,
    mlmc_gradient,
    optimal_sample_sizes,
    rmlmc_gradient,
    screen_levels,
)
from .fem import FeField, MeshLevel, build_mesh, l2_inner, l2_norm, prolong
from .field import Streams, eval_coeff, gl_grid, sample_xi
from .optimizers import (
    RunTrace,
    error_vs_reference,
    run_mlsg,
    run_rm_baseline,
    run_rmlsg,
    solve_reference,
)
from .pde import ProblemData, eval_f, grad_f, hessian_action, solve_adjoint, solve_primal
from .schedules import AlgoParams, default_params

__version__ = "0.1.0"
