"""Soft-max gated mixture-of-experts: estimation, selection, and inference."""

from .model import (
    Dataset,
    ExpertDesign,
    ModelError,
    MoeParams,
    gate_probs,
    log_quasi_likelihood,
    moe_log_density,
    responsibilities,
)
from .estimation import (
    EstimationError,
    FitConfig,
    FitResult,
    fit,
    initialize,
    multi_start_fit,
)
from .selection import SelectionReport, bic, param_count, select_g
from .inference import SandwichCovariance, mean_ci, sandwich_covariance, score_vector
from .tasks import (
    Prediction,
    classify_map,
    cluster_gate,
    cluster_posterior,
    predict_mean,
    predict_variance,
)
from .datagen import SignalSpec, gen_moe_sample, gen_switch_signal, gen_three_class

__version__ = "0.1.0"
