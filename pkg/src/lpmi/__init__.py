"""Latent-profile multiple imputation for longitudinal panels.

Bayesian mixture-of-trajectories models for panel outcomes with intermittent
missingness: a marginal sampler over observed values and a joint sampler
that models the presence process alongside the outcomes, plus diagnostics,
multiple-imputation output, and pooled downstream inference.
"""

__version__ = "0.1.0"

from .analysis import (PooledEstimate, categorize_a1c, cca_analysis, compare_report,
                       fit_event_model, fit_gee_logistic, pool, pool_gee)
from .archive import PosteriorArchive
from .design import DesignSpec, Designs, StackedData, assemble_designs
from .diagnostics import (bic, convergence_report, lpml, model_comparison_table,
                          ppp, ppp_suite, relabel_by_trajectory, replicate_datasets)
from .errors import (ConfigurationError, DataError, LpmiError, NumericalError,
                     PoolingError)
from .joint import JointFitConfig, extract_imputations_joint, run_joint_chain
from .marginal import MarginalFitConfig, impute_marginal, init_state, run_chain
from .model import (AllocationParams, ChainState, OutcomeParams, PresenceParams,
                    PriorSpec, allocation_probs, draw_class, outcome_loglik,
                    presence_loglik)
from .panel import Panel, PanelConfig, Patient, RawRecord, Record, build_panel, read_panel_csv
from .rng import RngStream
from .samplers import (sample_categorical, sample_invgamma, sample_invwishart,
                       sample_mvn, sample_pg)
from .screening import screen_covariates
from .simulate import GeneratorConfig, GroundTruth, Mechanism, generate, paper_like_config
from .splines import SplineBasisSpec, spline_basis

__all__ = [name for name in dir() if not name.startswith("_")]
