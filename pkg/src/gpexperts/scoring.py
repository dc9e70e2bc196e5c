"""Real-time risk scores from paired stable / deteriorating GP experts.

For expert ``m`` the score at time ``t`` is the posterior probability of
deterioration given the observations up to ``t``::

    R_m(t) = p f1_m / (p f1_m + (1 - p) f0_m)

where ``f0_m`` is the stationary (stable) density, ``f1_m`` the windowed
(deteriorating) density anchored at the latest observation and ``p`` the
class prior. The aggregate score weights the experts by the admission-based
responsibilities ``beta_hat``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

from .cohort import (
    CohortError,
    NormalizationStats,
    PatientRecord,
    atomic_write_text,
    format_float,
    normalize_patient,
)
from .mixture import StableMixture
from .mtgp import (
    ObservationBlock,
    StationaryGPParams,
    WindowedGPParams,
    log_marginal_likelihood,
    windowed_log_likelihood,
)
from .transfer import DeterioratingExpertSet, ResponsibilityRegressor, predict_responsibilities

BUNDLE_FORMAT = "gpexperts-bundle"
BUNDLE_VERSION = 1


def expert_risk(
    block: ObservationBlock,
    stable: StationaryGPParams,
    det: WindowedGPParams,
    anchor: float,
    prior: float,
) -> float:
    """Posterior probability of the deteriorating model for one expert."""
    if not 0.0 < prior < 1.0:
        raise ValueError("prior must lie in (0, 1)")
    log_f1 = windowed_log_likelihood(block, det, anchor)
    log_f0 = log_marginal_likelihood(block, stable, grad=False)[0]
    diff = log_f1 - log_f0
    if diff == 0.0:
        return float(prior)
    return float(expit(math.log(prior) - math.log1p(-prior) + diff))


def aggregate_risk(beta_hat, expert_scores) -> float:
    """Convex combination of expert scores with weights ``beta_hat / sum(beta_hat)``."""
    beta = np.asarray(beta_hat, dtype=float)
    scores = np.asarray(expert_scores, dtype=float)
    if beta.shape != scores.shape or beta.ndim != 1:
        raise ValueError("beta_hat and expert_scores must have the same length")
    total = beta.sum()
    if not total > 0 or np.any(beta < 0):
        raise ValueError("beta_hat must be non-negative with positive sum")
    value = float(np.dot(beta / total, scores))
    return min(max(value, float(scores.min())), float(scores.max()))


@dataclass(frozen=True, eq=False)
class ModelBundle:
    stable_mixture: StableMixture
    det_experts: DeterioratingExpertSet
    regressor: ResponsibilityRegressor
    normalization: NormalizationStats
    class_prior: float
    stream_names: tuple
    n_windows: int = 4
    window_width_hours: float = 12.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        M = self.stable_mixture.M
        if self.det_experts.M != M or self.regressor.M != M:
            raise ValueError("stable experts, deteriorating experts and regressor disagree on M")
        if not 0.0 < self.class_prior < 1.0:
            raise ValueError("class_prior must lie in (0, 1)")
        if len(self.stream_names) != self.stable_mixture.D:
            raise ValueError("stream names do not match expert dimension")
        object.__setattr__(self, "stream_names", tuple(self.stream_names))

    @property
    def M(self) -> int:
        return self.stable_mixture.M

    @property
    def schema(self):
        return self.regressor.schema

    def permuted(self, order) -> "ModelBundle":
        """Same model with experts reordered (regressor columns follow)."""
        order = list(order)
        reg = ResponsibilityRegressor(
            self.regressor.weights[:, order], self.regressor.schema, self.regressor.rss[order], self.regressor.ridge
        )
        return ModelBundle(
            self.stable_mixture.permuted(order),
            self.det_experts.permuted(order),
            reg,
            self.normalization,
            self.class_prior,
            self.stream_names,
            self.n_windows,
            self.window_width_hours,
            dict(self.metadata),
        )

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "stream_names": list(self.stream_names),
            "class_prior": self.class_prior,
            "window_config": {"W": self.n_windows, "width_hours": self.window_width_hours},
            "normalization": self.normalization.to_dict(),
            "stable_mixture": self.stable_mixture.to_dict(),
            "deteriorating_experts": self.det_experts.to_dict(),
            "regressor": self.regressor.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d) -> "ModelBundle":
        if d.get("format") != BUNDLE_FORMAT or "version" not in d:
            raise ValueError("not a model bundle (missing format/version)")
        if d["version"] != BUNDLE_VERSION:
            raise ValueError(f"unsupported bundle version {d['version']}")
        return cls(
            stable_mixture=StableMixture.from_dict(d["stable_mixture"]),
            det_experts=DeterioratingExpertSet.from_dict(d["deteriorating_experts"]),
            regressor=ResponsibilityRegressor.from_dict(d["regressor"]),
            normalization=NormalizationStats.from_dict(d["normalization"]),
            class_prior=d["class_prior"],
            stream_names=tuple(d["stream_names"]),
            n_windows=d["window_config"]["W"],
            window_width_hours=d["window_config"]["width_hours"],
            metadata=d.get("metadata", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class RiskTrace:
    patient_id: str
    times: np.ndarray
    per_expert: np.ndarray  # (T, M)
    aggregate: np.ndarray
    beta_hat: np.ndarray

    def __len__(self):
        return self.times.size

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        M = self.per_expert.shape[1]
        w.writerow(["time_hours"] + [f"expert_{m + 1}" for m in range(M)] + ["aggregate"])
        for t, row, agg in zip(self.times, self.per_expert, self.aggregate):
            w.writerow([format_float(t)] + [format_float(x) for x in row] + [format_float(agg)])
        return buf.getvalue()

    def plot_data(self) -> dict:
        """Series for external plotting: aggregate plus one series per expert."""
        return {
            "patient_id": self.patient_id,
            "time_hours": [float(t) for t in self.times],
            "aggregate": [float(x) for x in self.aggregate],
            "experts": {f"expert_{m + 1}": [float(x) for x in self.per_expert[:, m]] for m in range(self.per_expert.shape[1])},
            "beta_hat": [float(b) for b in self.beta_hat],
        }


def check_compatible(patient: PatientRecord, bundle: ModelBundle, stream_names=None) -> None:
    if stream_names is not None and tuple(stream_names) != bundle.stream_names:
        raise CohortError(
            f"stream names {list(stream_names)} do not match the bundle's {list(bundle.stream_names)}"
        )
    if patient.admission.schema != bundle.schema:
        raise CohortError("admission manifest does not match the bundle's")


def score_times(patient: PatientRecord, schedule=None) -> np.ndarray:
    """Evaluation times: every distinct observation time, or a fixed interval."""
    obs_times = np.unique(patient.time)
    if schedule is None or schedule == "observation":
        return obs_times
    step = float(schedule)
    if not step > 0:
        raise ValueError("schedule interval must be positive")
    first, last = obs_times[0], obs_times[-1]
    return first + step * np.arange(int(math.floor((last - first) / step)) + 1)


def _expert_scores(norm: PatientRecord, bundle: ModelBundle, t: float, lookback) -> np.ndarray:
    block = ObservationBlock.from_patient(norm, until=t, lookback=lookback)
    anchor = float(block.time.max())
    return np.array(
        [
            expert_risk(block, stable, det, anchor, bundle.class_prior)
            for stable, det in zip(bundle.stable_mixture.experts, bundle.det_experts.experts)
        ]
    )


def score_stream(
    patient: PatientRecord,
    bundle: ModelBundle,
    schedule=None,
    lookback: float | None = None,
) -> RiskTrace:
    """Risk trace of one patient (raw units) under ``bundle``.

    ``schedule`` is ``None`` (every distinct observation time) or an interval
    in hours; ``lookback`` caps the history used at each time point.
    """
    check_compatible(patient, bundle)
    norm = normalize_patient(patient, bundle.normalization)
    beta_hat = predict_responsibilities(bundle.regressor, norm.admission.features)
    times = score_times(patient, schedule)
    per_expert = np.vstack([_expert_scores(norm, bundle, t, lookback) for t in times])
    aggregate = np.array([aggregate_risk(beta_hat, row) for row in per_expert])
    return RiskTrace(patient.id, times, per_expert, aggregate, beta_hat)


def endpoint_score(patient: PatientRecord, bundle: ModelBundle, mode: str = "final", lookback=None) -> float:
    """Per-patient summary: aggregate at the last observation, or the trace maximum."""
    if mode == "max":
        return float(score_stream(patient, bundle, lookback=lookback).aggregate.max())
    if mode != "final":
        raise ValueError("mode must be 'final' or 'max'")
    check_compatible(patient, bundle)
    norm = normalize_patient(patient, bundle.normalization)
    beta_hat = predict_responsibilities(bundle.regressor, norm.admission.features)
    return aggregate_risk(beta_hat, _expert_scores(norm, bundle, float(patient.time.max()), lookback))


def write_trace(trace: RiskTrace, path, plot_data: bool = False) -> None:
    path = Path(path)
    atomic_write_text(path, trace.to_csv())
    if plot_data:
        atomic_write_text(path.with_suffix(".plot.json"), json.dumps(trace.plot_data(), indent=1) + "\n")


@dataclass(frozen=True, eq=False)
class WhatIf:
    original: RiskTrace
    counterfactual: RiskTrace
    overrides: dict

    def to_csv(self) -> str:
        M = self.original.beta_hat.size
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["time_hours", "aggregate_original", "aggregate_whatif"]
            + [f"beta_original_{m + 1}" for m in range(M)]
            + [f"beta_whatif_{m + 1}" for m in range(M)]
        )
        betas = [format_float(b) for b in self.original.beta_hat] + [format_float(b) for b in self.counterfactual.beta_hat]
        for t, a, b in zip(self.original.times, self.original.aggregate, self.counterfactual.aggregate):
            w.writerow([format_float(t), format_float(a), format_float(b)] + betas)
        return buf.getvalue()

    @property
    def max_difference(self) -> float:
        return float(np.max(np.abs(self.original.aggregate - self.counterfactual.aggregate)))


def whatif(patient: PatientRecord, bundle: ModelBundle, overrides: dict, schedule=None, lookback=None) -> WhatIf:
    """Score the same observations under the original and an overridden admission vector."""
    changed = replace(patient, admission=patient.admission.with_overrides(overrides))
    return WhatIf(
        score_stream(patient, bundle, schedule, lookback),
        score_stream(changed, bundle, schedule, lookback),
        dict(overrides),
    )
