"""Offline training: stable-domain discovery, transfer, deteriorating experts."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .cohort import Cohort, CohortError, apply_normalization, fit_normalization
from .mixture import (
    DEFAULT_B_BAR,
    DEFAULT_EPS,
    DEFAULT_M_MAX,
    DEFAULT_MAX_ITER,
    discover_experts,
    run_em,
)
from .mtgp import ObservationBlock, OptimizerConfig
from .scoring import ModelBundle
from .transfer import (
    DEFAULT_WINDOW_WIDTH,
    DEFAULT_WINDOWS,
    fit_responsibility_regression,
    predict_responsibilities,
    self_taught_partition,
    train_deteriorating_experts,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    eps: float = DEFAULT_EPS
    b_bar: float = DEFAULT_B_BAR
    m_max: int = DEFAULT_M_MAX
    force_m: int | None = None
    n_windows: int = DEFAULT_WINDOWS
    window_width_hours: float = DEFAULT_WINDOW_WIDTH
    prior: float | None = None
    seed: int = 0
    max_iter: int = DEFAULT_MAX_ITER
    criterion: str = "q"
    opt_cfg: OptimizerConfig = field(default_factory=OptimizerConfig)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainSummary:
    selected_M: int
    log_bayes_factors: dict
    regression_rss: list
    partition_sizes: list
    class_prior: float
    em_reports: dict

    def to_dict(self) -> dict:
        return {
            "selected_M": self.selected_M,
            "log_bayes_factors": {str(k): v for k, v in self.log_bayes_factors.items()},
            "regression_rss": self.regression_rss,
            "partition_sizes": self.partition_sizes,
            "class_prior": self.class_prior,
            "em": {str(k): r.to_dict() for k, r in self.em_reports.items()},
        }


def train_bundle(cohort: Cohort, config: TrainConfig | None = None, trace=None) -> tuple[ModelBundle, TrainSummary]:
    """Run the four offline steps and package the result.

    1. Normalize with stable-patient statistics and discover the experts on
       the stable patients (or fit ``force_m`` experts directly).
    2. Regress the final soft responsibilities on the admission features.
    3. Predict responsibilities of the deteriorating patients and draw the
       self-taught partition.
    4. Fit one windowed GP per expert anchored at each patient's stay end.
    """
    cfg = config or TrainConfig()
    stable_idx = np.flatnonzero(cohort.labels == 0)
    det_idx = np.flatnonzero(cohort.labels == 1)
    if det_idx.size == 0:
        raise CohortError("cohort has no deteriorating patients; cannot train deteriorating experts")
    if stable_idx.size == 0:
        raise CohortError("cohort has no stable patients; cannot discover experts")

    stats = fit_normalization(cohort, "stable")
    norm = apply_normalization(cohort, stats)
    D = cohort.D
    stable_blocks = [ObservationBlock.from_patient(norm.patients[i]) for i in stable_idx]

    if cfg.force_m is not None:
        mixture, resp, report = run_em(
            stable_blocks, cfg.force_m, cfg.eps, cfg.max_iter, cfg.seed, cfg.opt_cfg, D, trace
        )
        reports, factors = {cfg.force_m: report}, {}
    else:
        found = discover_experts(
            stable_blocks,
            eps=cfg.eps,
            b_bar=cfg.b_bar,
            m_max=cfg.m_max,
            seed=cfg.seed,
            max_iter=cfg.max_iter,
            opt_cfg=cfg.opt_cfg,
            D=D,
            criterion=cfg.criterion,
            trace=trace,
        )
        mixture, resp = found.mixture, found.responsibilities
        reports, factors = found.reports, found.log_bayes_factors
    logger.info("stable domain: M=%d experts", mixture.M)

    X = norm.admission_matrix()
    reg = fit_responsibility_regression(X[stable_idx], resp, schema=cohort.schema)
    beta_det = predict_responsibilities(reg, X[det_idx])
    partition = self_taught_partition(beta_det, cfg.seed)

    det_patients = [norm.patients[i] for i in det_idx]
    det_blocks = [ObservationBlock.from_patient(p) for p in det_patients]
    anchors = np.array([p.stay_length_hours for p in det_patients])
    det_experts = train_deteriorating_experts(
        det_blocks,
        anchors,
        partition,
        mixture,
        n_windows=cfg.n_windows,
        width=cfg.window_width_hours,
        opt_cfg=cfg.opt_cfg,
        seed=cfg.seed,
    )

    prior = cfg.prior if cfg.prior is not None else det_idx.size / cohort.N
    bundle = ModelBundle(
        stable_mixture=mixture,
        det_experts=det_experts,
        regressor=reg,
        normalization=stats,
        class_prior=float(prior),
        stream_names=cohort.stream_names,
        n_windows=cfg.n_windows,
        window_width_hours=cfg.window_width_hours,
        metadata={
            "training_seed": cfg.seed,
            "cohort_fingerprint": cohort.fingerprint(),
            "n_stable": int(stable_idx.size),
            "n_deteriorating": int(det_idx.size),
        },
    )
    summary = TrainSummary(
        selected_M=mixture.M,
        log_bayes_factors=factors,
        regression_rss=[float(x) for x in reg.rss],
        partition_sizes=[int(c) for c in det_experts.counts],
        class_prior=float(prior),
        em_reports=reports,
    )
    return bundle, summary
