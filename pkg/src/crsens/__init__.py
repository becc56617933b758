"""Sensitivity analysis for cause-specific hazards with missing-not-at-random causes of failure."""

from .cohort import Cohort, Schema, Subject, design_rows, export_cohort, load_cohort
from .errors import (ConvergenceError, CRSensError, DomainError, InputError, ParseError,
                     SeparationError, SingularMatrixError, StudyError, ValidationError)
from .inference import (BandResult, BootstrapDraws, RobustnessResult, band, bootstrap_sup_stats,
                        naive_robustness_interval, robustness_interval)
from .influence import InfluenceArray, assemble_influence, gamma_correction_term, martingale_residual_term
from .missingness import MissingnessFit, fit_missingness, marginal_missing_death_prob, predict_cause2
from .pseudoscore import (FunctionalFit, SensitivityGrid, fit_functional, hessian, interpolate_beta,
                          jump_weights, log_pseudo_likelihood, pseudo_score, solve_beta)
from .simulator import SimDesign, SimReport, generate_cohort, population_beta_star, run_study

__version__ = "0.1.0"
