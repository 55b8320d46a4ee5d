"""Boosting weak-order schemes by randomized grid expansions, with noise splitting
and regularization tools for total variation estimates."""

from .errors import ConfigError, InvariantViolation
from .expansion import build_expansion, build_proof_decomposition, evaluate_matrix, qhat_matrix
from .matrix import MatrixSemigroup, expm, tv_distance_matrix
from .mc import MCEstimate
from .order_params import GridSpec, GridTooCoarseError, OrderParams, kappa, l_max, m_steps, q_nu, q_order, t_nu
from .random_grid import estimate_qhat, sample_grid, weak_error_study
from .report import ConvergenceReport, fit_slope
from .scheme import SchemeFunction, SchemeSemigroup, make_euler, ou_oracle, step, weak_expectation
from .splitting import build_split, bump, convolved_density, fit_lower_bound, regularized_expectation, theta_weight

__version__ = "0.1.0"
