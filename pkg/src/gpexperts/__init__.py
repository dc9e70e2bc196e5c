"""Mixtures of multi-task GP experts for personalized risk scoring."""

from .cohort import (
    AdmissionFeature,
    AdmissionSchema,
    AdmissionVector,
    Cohort,
    CohortError,
    CohortParseError,
    NormalizationStats,
    PatientRecord,
    apply_normalization,
    fit_normalization,
    load_cohort,
    load_cohort_dir,
    load_patient_file,
    save_cohort,
)
from .evaluation import roc_auc, run_cv_experiment, stratified_kfold, tpr_ppv_curve
from .mixture import StableMixture, bayes_factor, discover_experts, e_step, model_complexity, run_em
from .mtgp import (
    ObservationBlock,
    StationaryGPParams,
    WindowedGPParams,
    fit_weighted_mle,
    fit_windowed_mle,
    log_marginal_likelihood,
    se_kernel,
    windowed_log_likelihood,
)
from .pipeline import TrainConfig, train_bundle
from .scoring import ModelBundle, aggregate_risk, endpoint_score, expert_risk, score_stream, whatif
from .synth import GeneratorConfig, generate_cohort, paper_like_preset, separated_preset
from .transfer import (
    fit_responsibility_regression,
    predict_responsibilities,
    self_taught_partition,
    train_deteriorating_experts,
)

__version__ = "0.1.0"
