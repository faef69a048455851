"""Bayesian optimization of sums and integrals of an expensive integrand.

The integrand ``F(x, w)`` is modelled by a Gaussian process; the objective
``G(x) = sum_w F(x, w) p(w)`` (or the integral) inherits a Gaussian posterior,
and evaluations are chosen by their one-step value of information about
``max_x G(x)``.
"""

from .domain import Box, FiniteSet
from .driver import InferenceSettings, Settings, recommend, run_bqo
from .errors import (BQOError, ConfigurationError, IllConditionedError, NumericalConsistencyError,
                     OptimizationFailure, SamplerStuckError, SimulatorFailure,
                     UnsupportedOperationError)
from .gp import History, fit, log_marginal_likelihood, posterior_cov, posterior_mean
from .kernels import HyperParams, kernel_eval, kernel_grad, kernel_hyper_grad
from .optimize import AdamConfig, adam_maximize
from .problems import Problem, analytic_problem, branin_problem, gp_sim_problem, make_problem
from .quadrature import Measure, QuadPosterior

__version__ = "0.1.0"
