"""Synthetic cohorts from a hierarchical latent-class model.

Every patient draws a latent class ``Z ~ pi``, admission features
``Y | Z``, a clinical status ``v | Z ~ Bernoulli(p_Z)``, a stay length and
an irregular sampling grid. Stream values come from the class's stationary
GP when ``v = 0`` and from its windowed GP anchored at the end of the
stay when ``v = 1``. Values are generated in z-units and mapped to raw
units with a per-stream offset and scale.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cohort import (
    LATENT_FILE,
    AdmissionFeature,
    AdmissionSchema,
    AdmissionVector,
    Cohort,
    PatientRecord,
    atomic_write_text,
    save_cohort,
)
from .mtgp import StationaryGPParams, WindowedGPParams, _cholesky_jittered, assemble_covariance

VITALS = ("o2_saturation", "heart_rate", "respiratory_rate", "temperature", "systolic_bp")


@dataclass(frozen=True)
class AdmissionModel:
    """Class-conditional distribution of one admission feature.

    Numeric features are Gaussian with per-class ``mean`` / ``std``;
    categorical ones use per-class level probabilities ``probs`` (M x levels).
    """

    feature: AdmissionFeature
    mean: tuple = ()
    std: tuple = ()
    probs: tuple = ()

    def sample(self, z: int, rng):
        if self.feature.kind == "numeric":
            return float(rng.normal(self.mean[z], self.std[z]))
        p = np.asarray(self.probs[z], dtype=float)
        return self.feature.levels[int(rng.choice(p.size, p=p / p.sum()))]

    def to_dict(self) -> dict:
        d = self.feature.to_dict()
        if self.feature.kind == "numeric":
            d.update(mean=list(self.mean), std=list(self.std))
        else:
            d["probs"] = [list(r) for r in self.probs]
        return d

    @classmethod
    def from_dict(cls, d) -> "AdmissionModel":
        feat = AdmissionFeature.from_dict(d)
        if feat.kind == "numeric":
            return cls(feat, tuple(d["mean"]), tuple(d["std"]))
        return cls(feat, probs=tuple(tuple(r) for r in d["probs"]))


@dataclass(frozen=True, eq=False)
class GeneratorConfig:
    stream_names: tuple
    class_weights: np.ndarray
    stable: tuple
    deteriorating: tuple
    det_prob: np.ndarray
    admission: tuple = ()
    stream_offset: np.ndarray | None = None
    stream_scale: np.ndarray | None = None
    stay_median_hours: float = 48.0
    stay_log_sigma: float = 0.6
    stay_min_hours: float = 8.0
    stay_max_hours: float = 400.0
    interval_hours: float = 4.0
    jitter_hours: float = 1.0
    shared_times: bool = False
    seed: int = 0

    def __post_init__(self):
        D = len(self.stream_names)
        pi = np.asarray(self.class_weights, dtype=float)
        M = pi.size
        if M < 1 or np.any(pi < 0) or abs(pi.sum() - 1) > 1e-9:
            raise ValueError("class_weights must be a probability vector")
        if len(self.stable) != M or len(self.deteriorating) != M:
            raise ValueError("need one stable and one deteriorating model per class")
        if any(p.D != D for p in self.stable) or any(p.D != D for p in self.deteriorating):
            raise ValueError("GP dimensions must match the stream count")
        det = np.asarray(self.det_prob, dtype=float)
        if det.shape != (M,) or np.any((det < 0) | (det > 1)):
            raise ValueError("det_prob must hold one probability per class")
        for a in self.admission:
            n = len(a.mean) if a.feature.kind == "numeric" else len(a.probs)
            if n != M:
                raise ValueError(f"admission model {a.feature.name!r} must cover {M} classes")
        if not self.interval_hours > 2 * self.jitter_hours >= 0:
            raise ValueError("sampling interval must exceed twice the jitter")
        if not 0 < self.stay_min_hours <= self.stay_max_hours:
            raise ValueError("invalid stay length bounds")
        offset = np.zeros(D) if self.stream_offset is None else np.asarray(self.stream_offset, float)
        scale = np.ones(D) if self.stream_scale is None else np.asarray(self.stream_scale, float)
        object.__setattr__(self, "stream_names", tuple(self.stream_names))
        object.__setattr__(self, "class_weights", pi)
        object.__setattr__(self, "det_prob", det)
        object.__setattr__(self, "stable", tuple(self.stable))
        object.__setattr__(self, "deteriorating", tuple(self.deteriorating))
        object.__setattr__(self, "admission", tuple(self.admission))
        object.__setattr__(self, "stream_offset", offset)
        object.__setattr__(self, "stream_scale", scale)

    @property
    def M(self) -> int:
        return self.class_weights.size

    @property
    def D(self) -> int:
        return len(self.stream_names)

    @property
    def schema(self) -> AdmissionSchema:
        return AdmissionSchema(tuple(a.feature for a in self.admission))

    def to_dict(self) -> dict:
        return {
            "stream_names": list(self.stream_names),
            "class_weights": self.class_weights.tolist(),
            "stable": [p.to_dict() for p in self.stable],
            "deteriorating": [p.to_dict() for p in self.deteriorating],
            "det_prob": self.det_prob.tolist(),
            "admission": [a.to_dict() for a in self.admission],
            "stream_offset": self.stream_offset.tolist(),
            "stream_scale": self.stream_scale.tolist(),
            "stay_median_hours": self.stay_median_hours,
            "stay_log_sigma": self.stay_log_sigma,
            "stay_min_hours": self.stay_min_hours,
            "stay_max_hours": self.stay_max_hours,
            "interval_hours": self.interval_hours,
            "jitter_hours": self.jitter_hours,
            "shared_times": self.shared_times,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "GeneratorConfig":
        d = dict(d)
        d["stable"] = tuple(StationaryGPParams.from_dict(p) for p in d["stable"])
        d["deteriorating"] = tuple(WindowedGPParams.from_dict(p) for p in d["deteriorating"])
        d["admission"] = tuple(AdmissionModel.from_dict(a) for a in d.get("admission", ()))
        return cls(**d)

    def replace(self, **changes) -> "GeneratorConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return GeneratorConfig(**d)


def load_config(path) -> GeneratorConfig:
    with open(path) as fh:
        return GeneratorConfig.from_dict(json.load(fh))


def save_config(cfg: GeneratorConfig, path) -> None:
    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# sampling


def _sample_times(cfg: GeneratorConfig, stay: float, rng):
    def grid():
        start = rng.uniform(0.0, cfg.interval_hours)
        k = np.arange(int(np.ceil(stay / cfg.interval_hours)) + 1)
        t = start + k * cfg.interval_hours
        t = t + rng.uniform(-cfg.jitter_hours, cfg.jitter_hours, size=t.size)
        return t[(t >= 0) & (t <= stay)]

    if cfg.shared_times:
        t = grid()
        streams = [np.full(t.size, d) for d in range(cfg.D)]
        times = [t] * cfg.D
    else:
        times = [grid() for _ in range(cfg.D)]
        streams = [np.full(t.size, d) for d, t in enumerate(times)]
    stream = np.concatenate(streams).astype(np.int64)
    time = np.concatenate(times)
    if stream.size == 0:
        stream = np.array([rng.integers(cfg.D)])
        time = np.array([rng.uniform(0.0, stay)])
    return stream, time


def _draw_gp(stream, time, params: StationaryGPParams, rng):
    K = assemble_covariance(stream, time, params)
    L = _cholesky_jittered(K)
    return params.mean[stream] + L @ rng.standard_normal(stream.size)


def sample_patient(cfg: GeneratorConfig, rng, patient_id: str = "p0"):
    """Draw one patient; returns ``(PatientRecord, (Z, v))``."""
    z = int(rng.choice(cfg.M, p=cfg.class_weights))
    raw = {a.feature.name: a.sample(z, rng) for a in cfg.admission}
    v = int(rng.random() < cfg.det_prob[z])
    stay = float(np.exp(np.log(cfg.stay_median_hours) + cfg.stay_log_sigma * rng.standard_normal()))
    stay = float(np.clip(stay, cfg.stay_min_hours, cfg.stay_max_hours))
    stream, time = _sample_times(cfg, stay, rng)
    if v == 0:
        zval = _draw_gp(stream, time, cfg.stable[z], rng)
    else:
        det: WindowedGPParams = cfg.deteriorating[z]
        win = det.window_of(time, stay)
        zval = np.empty(stream.size)
        for w in np.unique(win):
            sel = win == w
            zval[sel] = _draw_gp(stream[sel], time[sel] - stay, det.windows[w], rng)
    value = cfg.stream_offset[stream] + cfg.stream_scale[stream] * zval
    admission = AdmissionVector.from_raw(raw, cfg.schema)
    record = PatientRecord(patient_id, stream, time, value, admission, stay, v)
    return record, (z, v)


def generate_cohort(cfg: GeneratorConfig, N: int, seed: int | None = None):
    """Draw ``N`` patients; patient ``i`` uses the RNG stream ``(seed, i)``.

    Returns the cohort and an ``(N, 2)`` integer array of latent ``(Z, v)``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    seed = cfg.seed if seed is None else seed
    width = len(str(N - 1))
    patients, latent = [], []
    for i in range(N):
        rng = np.random.default_rng([seed, i])
        rec, zv = sample_patient(cfg, rng, f"p{i:0{width}d}")
        patients.append(rec)
        latent.append(zv)
    cohort = Cohort(tuple(patients), cfg.stream_names, cfg.schema)
    return cohort, np.array(latent, dtype=int)


def latent_text(cohort: Cohort, latent) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "Z", "v"])
    for p, (z, v) in zip(cohort.patients, latent):
        w.writerow([p.id, int(z), int(v)])
    return buf.getvalue()


def write_generated(cohort: Cohort, latent, out_dir):
    """Write cohort files plus ``latent.csv`` into ``out_dir``."""
    paths = save_cohort(cohort, out_dir)
    lpath = Path(out_dir) / LATENT_FILE
    atomic_write_text(lpath, latent_text(cohort, latent))
    return (*paths, lpath)


def read_latent(path) -> dict:
    with open(path, newline="") as fh:
        return {r["patient_id"]: (int(r["Z"]), int(r["v"])) for r in csv.DictReader(fh)}


# ---------------------------------------------------------------------------
# presets


def _ramp_windows(stable: StationaryGPParams, shift, W=4, width=12.0, noise_boost=1.0):
    """Windowed model whose mean moves linearly from ``stable.mean`` toward ``stable.mean + shift``."""
    shift = np.asarray(shift, dtype=float)
    windows = []
    for w in range(W):
        frac = (w + 1) / W
        windows.append(
            StationaryGPParams(
                stable.mean + frac * shift,
                stable.chol_factor * (1.0 + (noise_boost - 1.0) * frac),
                stable.lengthscale,
                stable.noise_var,
            )
        )
    return WindowedGPParams(tuple(windows), width)


def _det_probs(class_weights, relative_risk, fraction):
    rr = np.asarray(relative_risk, dtype=float)
    p = rr * fraction / float(np.dot(class_weights, rr))
    if np.any(p > 1):
        raise ValueError("deteriorating fraction too large for the class risk profile")
    return p


# z-unit patterns; stream order follows VITALS
_PAPER_STABLE_MEANS = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 1.6, 1.2, 1.2, 0.0],  # febrile / tachycardic baseline (transplant patients)
        [-1.2, 0.0, 0.0, 0.0, -1.4],
        [0.0, -1.0, 0.0, 0.0, 1.5],
    ]
)
_PAPER_DET_SHIFTS = np.array(
    [
        [-0.8, 1.6, 1.6, 0.8, -0.6],
        [-1.6, 0.3, 0.2, 0.0, -1.6],
        [-0.6, 1.0, 1.6, 0.2, -0.4],
        [-1.0, 1.5, 0.6, 0.0, -1.2],
    ]
)
_PAPER_WEIGHTS = {1: [1.0], 2: [0.6, 0.4], 3: [0.45, 0.3, 0.25], 4: [0.4, 0.25, 0.2, 0.15]}
_PAPER_RR = [1.0, 1.6, 1.3, 0.8]


def paper_like_preset(
    n_classes: int = 4,
    deteriorating_fraction: float = 0.0832,
    seed: int = 0,
    stay_median_hours: float = 48.0,
    stay_log_sigma: float = 0.6,
    stay_min_hours: float = 8.0,
    stay_max_hours: float = 400.0,
    heterogeneity: str = "distinct",
    det_noise_boost: float = 1.3,
) -> GeneratorConfig:
    """Five vital signs, seven admission features, ``n_classes`` latent classes (1-4).

    Parameters
    ----------
    heterogeneity : {"distinct", "crossed"}
        ``"distinct"`` gives every class its own deterioration signature.
        ``"crossed"`` makes class ``m`` deteriorate toward the stable baseline
        of class ``(m + 1) % n_classes``, so a vital-sign pattern that is
        normal for one class signals deterioration in another.
    det_noise_boost : float
        Factor applied to the Cholesky factor in the window nearest the
        anchor (interpolated linearly across windows).
    """
    if n_classes not in _PAPER_WEIGHTS:
        raise ValueError("paper-like preset supports 1 to 4 classes")
    if heterogeneity not in ("distinct", "crossed"):
        raise ValueError("heterogeneity must be 'distinct' or 'crossed'")
    M = n_classes
    pi = np.array(_PAPER_WEIGHTS[M])
    corr = np.eye(5)
    corr[1, 2] = corr[2, 1] = 0.4  # heart rate / respiratory rate
    corr[0, 2] = corr[2, 0] = -0.3
    base_sigma = 0.5 * corr
    stable, det = [], []
    for m in range(M):
        p = StationaryGPParams.from_sigma(_PAPER_STABLE_MEANS[m], base_sigma, 8.0, 0.1)
        stable.append(p)
        if heterogeneity == "crossed" and M > 1:
            shift = _PAPER_STABLE_MEANS[(m + 1) % M] - _PAPER_STABLE_MEANS[m]
        else:
            shift = _PAPER_DET_SHIFTS[m]
        det.append(_ramp_windows(p, shift, noise_boost=det_noise_boost))

    def rows(table):
        return tuple(tuple(table[m]) for m in range(M))

    admission = (
        AdmissionModel(
            AdmissionFeature("transfer_status", "categorical", ("ed", "clinic", "outside_hospital")),
            probs=rows([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.5, 0.2, 0.3], [0.4, 0.4, 0.2]]),
        ),
        AdmissionModel(
            AdmissionFeature("gender", "categorical", ("female", "male")),
            probs=rows([[0.55, 0.45], [0.3, 0.7], [0.45, 0.55], [0.5, 0.5]]),
        ),
        AdmissionModel(
            AdmissionFeature("age", "numeric"),
            mean=(55.0, 48.0, 70.0, 62.0)[:M],
            std=(14.0, 12.0, 9.0, 11.0)[:M],
        ),
        AdmissionModel(
            AdmissionFeature("race", "categorical", ("white", "black", "asian", "other")),
            probs=rows([[0.55, 0.15, 0.15, 0.15]] * 4),
        ),
        AdmissionModel(
            AdmissionFeature("ethnicity", "categorical", ("non_hispanic", "hispanic")),
            probs=rows([[0.75, 0.25]] * 4),
        ),
        AdmissionModel(
            AdmissionFeature("stem_cell_transplant", "categorical", ("no", "yes")),
            probs=rows([[0.95, 0.05], [0.15, 0.85], [0.95, 0.05], [0.9, 0.1]]),
        ),
        AdmissionModel(
            AdmissionFeature("admission_unit", "categorical", ("medicine", "oncology", "cardiology")),
            probs=rows([[0.7, 0.15, 0.15], [0.15, 0.8, 0.05], [0.2, 0.1, 0.7], [0.5, 0.1, 0.4]]),
        ),
    )
    return GeneratorConfig(
        stream_names=VITALS,
        class_weights=pi,
        stable=tuple(stable),
        deteriorating=tuple(det),
        det_prob=_det_probs(pi, _PAPER_RR[:M], deteriorating_fraction),
        admission=admission,
        stream_offset=np.array([96.0, 80.0, 18.0, 37.0, 120.0]),
        stream_scale=np.array([2.0, 12.0, 3.0, 0.5, 15.0]),
        stay_median_hours=stay_median_hours,
        stay_log_sigma=stay_log_sigma,
        stay_min_hours=stay_min_hours,
        stay_max_hours=stay_max_hours,
        seed=seed,
    )


def separated_preset(
    n_classes: int = 2,
    D: int = 2,
    separation: float = 3.0,
    deteriorating_fraction: float = 0.0,
    lengthscale: float = 8.0,
    noise_var: float = 0.1,
    class_weights: Sequence[float] | None = None,
    seed: int = 0,
    stay_median_hours: float = 36.0,
    stay_log_sigma: float = 0.3,
    stay_min_hours: float = 24.0,
    stay_max_hours: float = 60.0,
) -> GeneratorConfig:
    """Classes whose stable means sit ``separation`` pooled standard deviations apart.

    Class 0 is centred at the origin; class ``m >= 1`` is shifted along
    stream ``(m - 1) % D`` (and in the opposite direction once the streams
    are used up), so every pair of classes differs by at least
    ``separation`` pooled stds on some stream. One categorical admission
    feature ``group`` matches the class with probability 0.8.
    """
    M = n_classes
    pi = np.full(M, 1.0 / M) if class_weights is None else np.asarray(class_weights, float)
    pooled_std = float(np.sqrt(1.0 + noise_var))
    means = np.zeros((M, D))
    for m in range(1, M):
        sign = 1.0 if (m - 1) // D % 2 == 0 else -1.0
        means[m, (m - 1) % D] = sign * separation * pooled_std
    stable = tuple(StationaryGPParams(means[m], np.eye(D), lengthscale, noise_var) for m in range(M))
    det = tuple(_ramp_windows(s, np.full(D, 2.0)) for s in stable)
    levels = tuple(f"g{m}" for m in range(max(M, 2)))
    probs = []
    for m in range(M):
        row = np.full(len(levels), 0.2 / max(len(levels) - 1, 1))
        row[m] = 0.8
        probs.append(tuple(row))
    admission = (
        AdmissionModel(AdmissionFeature("group", "categorical", levels), probs=tuple(probs)),
        AdmissionModel(AdmissionFeature("age", "numeric"), mean=(60.0,) * M, std=(10.0,) * M),
    )
    return GeneratorConfig(
        stream_names=tuple(f"s{d}" for d in range(D)),
        class_weights=pi,
        stable=stable,
        deteriorating=det,
        det_prob=np.full(M, deteriorating_fraction),
        admission=admission,
        stay_median_hours=stay_median_hours,
        stay_log_sigma=stay_log_sigma,
        stay_min_hours=stay_min_hours,
        stay_max_hours=stay_max_hours,
        seed=seed,
    )


PRESETS = {"paper-like": paper_like_preset, "separated": separated_preset}
