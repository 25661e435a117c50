"""Landmark dynamic prediction with Cox PH mixture cure models.

Longitudinal covariates measured up to a landmark time are summarized either
by their last observed values or by predicted random effects from per-covariate
mixed models; the summaries enter the latency part of a mixture cure model
fitted by EM.
"""

from .cure_em import BaselineHazard, CureModelError, CureModelFit, estep_q, fit_cure_em, mstep_incidence, mstep_latency
from .data_model import (
    DataError,
    LandmarkConfig,
    LandmarkDataset,
    LongitudinalDataset,
    SubjectTable,
    build_landmark_dataset,
    load_datasets,
)
from .metrics import (
    MetricReport,
    auc_lat_t,
    brier_lat_t,
    c_index,
    km_censoring,
    weighted_auc_inc,
    weighted_brier_inc,
)
from .mixed_models import MixedModelFit, MixedModelSpec, fit_glmm_pql, fit_lmm, predict_random_effects
from .pipeline import LandmarkModel, evaluate_model, fit_landmark_model
from .prediction import PredictionResult, SummaryStrategy, locf_summary, predict, predict_subject
from .simulation import ScenarioSpec, generate_dataset

__version__ = "0.1.0"
