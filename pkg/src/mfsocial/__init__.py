"""Decentralized solvers and experiments for delayed LQ mean-field teams."""

from .grid import (TimeGrid, PathEnsemble, NoiseEnsemble, build_grid, window_mask,
                   discounted_norm, shifted_value)
from .scenario import (Scenario, CoefficientPath, InitialLaw, validate_scenario,
                       empirical_mix, derived_coefficients, block_norms,
                       load_scenario, scenario_from_dict, scenario_to_dict,
                       canonical_json, scenario_hash)
from .condexp import CondExpOperator, fit_conditional_expectation
from .forward import cc_forward, simulate_variation, control_values
from .backward import solve_linear_absde, solve_deterministic_advanced, cc_backward
from .ccfix import (PicardOptions, CCSolution, picard_solve, mean_system_solve,
                    cc_residual, decentralized_control, auxiliary_cost)
from .wellposedness import solve_discount_root, compute_L, certify, Certificate
from .population import (simulate_population, social_cost, consistency_error,
                         directional_derivative, epsilon_terms, rate_fit,
                         Perturbation)
from .oracles import riccati_lq, deterministic_qp

__version__ = "0.1.0"
