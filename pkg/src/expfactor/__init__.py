"""Exponential-family factor models fitted by approximate EM or Adam SGD."""
from .covariance import CovEstimate, cov_errors, model_covariance, sample_covariance
from .em import EMConfig, adapted_cubature, fit_em, gh_rule_1d, initialize, m_step, update_dispersion
from .family import QuasiFamily, parse_family
from .laplace import (PosteriorApprox, expected_hessian, likelihood_mode, map_mode,
                      posterior_approx, working_response)
from .likelihood import EvalConfig, exact_gaussian_marginal, log_sum_exp, simulated_marginal_loglik
from .model import Dataset, EFMParams, complete_loglik, identify, linear_predictor
from .sgd import (AdamState, GradientBundle, SGDConfig, adam_step, fit_sgd, grad_complete,
                  grad_lapl, grad_ps, grad_sml)
from .simulation import (FanPriors, MultiplexStack, fan_scenario, multiplex_weights,
                         simulate_data, simulate_factor_model)

__version__ = "0.1.0"
