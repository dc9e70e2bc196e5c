"""Cohort data model, file ingestion and normalization.

A cohort is a list of patients, each carrying irregularly sampled
observations on ``D`` physiological streams, a static admission vector,
the length of the ward stay and a binary outcome (0 = discharged,
1 = transferred to the ICU).

Two text files describe a cohort on disk:

``measurements.csv``
    header ``patient_id,stream,time_hours,value``; one row per observation.
``patients.jsonl``
    first line is a cohort header ``{"stream_names": [...],
    "admission_schema": [...]}``; every following line is one patient
    ``{"id", "stay_length_hours", "outcome", "admission": {name: value}}``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MEASUREMENTS_FILE = "measurements.csv"
PATIENTS_FILE = "patients.jsonl"
LATENT_FILE = "latent.csv"

MEASUREMENT_HEADER = ["patient_id", "stream", "time_hours", "value"]

STD_FLOOR = 1e-6


class CohortError(ValueError):
    """Raised for malformed cohort files or violated cohort invariants."""


class CohortParseError(CohortError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def format_float(x: float) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# admission features


@dataclass(frozen=True)
class AdmissionFeature:
    """One raw admission feature.

    ``kind`` is ``"numeric"`` or ``"categorical"``. Categorical features
    are one-hot encoded with the first level dropped.
    """

    name: str
    kind: str = "numeric"
    levels: tuple = ()

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise CohortError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical" and len(self.levels) < 2:
            raise CohortError(f"feature {self.name!r}: categorical needs >= 2 levels")
        object.__setattr__(self, "levels", tuple(str(lv) for lv in self.levels))

    @property
    def width(self) -> int:
        return 1 if self.kind == "numeric" else len(self.levels) - 1

    def column_names(self) -> list[str]:
        if self.kind == "numeric":
            return [self.name]
        return [f"{self.name}={lv}" for lv in self.levels[1:]]

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind}
        if self.kind == "categorical":
            d["levels"] = list(self.levels)
        return d

    @classmethod
    def from_dict(cls, d) -> "AdmissionFeature":
        return cls(name=d["name"], kind=d.get("kind", "numeric"), levels=tuple(d.get("levels", ())))


@dataclass(frozen=True)
class AdmissionSchema:
    """Encoding manifest shared by every patient of a cohort.

    The encoded vector is the concatenation of the per-feature encodings
    followed by a constant ``1`` intercept column, so ``S = width + 1``.
    """

    features: tuple[AdmissionFeature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise CohortError("duplicate admission feature names")
        object.__setattr__(self, "features", tuple(self.features))

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    @property
    def S(self) -> int:
        return sum(f.width for f in self.features) + 1

    def column_names(self) -> list[str]:
        cols = []
        for f in self.features:
            cols.extend(f.column_names())
        return cols + ["intercept"]

    def numeric_mask(self) -> np.ndarray:
        """Boolean mask over encoded columns marking numeric features."""
        mask = []
        for f in self.features:
            mask.extend([f.kind == "numeric"] * f.width)
        return np.array(mask + [False], dtype=bool)

    def feature(self, name: str) -> AdmissionFeature:
        for f in self.features:
            if f.name == name:
                return f
        raise KeyError(name)

    def encode(self, raw: dict) -> np.ndarray:
        missing = [n for n in self.names if n not in raw]
        if missing:
            raise CohortError(f"admission is missing features {missing}")
        unknown = sorted(set(raw) - set(self.names))
        if unknown:
            raise CohortError(f"unknown admission features {unknown}; valid: {self.names}")
        out = []
        for f in self.features:
            v = raw[f.name]
            if f.kind == "numeric":
                try:
                    out.append(float(v))
                except (TypeError, ValueError):
                    raise CohortError(f"feature {f.name!r}: {v!r} is not numeric") from None
            else:
                level = str(v)
                if level not in f.levels:
                    raise CohortError(
                        f"feature {f.name!r}: level {level!r} not in {list(f.levels)}"
                    )
                onehot = [0.0] * (len(f.levels) - 1)
                idx = f.levels.index(level)
                if idx > 0:
                    onehot[idx - 1] = 1.0
                out.extend(onehot)
        out.append(1.0)
        return np.array(out, dtype=float)

    def normalize_raw(self, raw: dict) -> dict:
        """Coerce raw values to canonical python types (float / level string)."""
        out = {}
        for f in self.features:
            v = raw[f.name]
            out[f.name] = float(v) if f.kind == "numeric" else str(v)
        return out

    def to_list(self) -> list:
        return [f.to_dict() for f in self.features]

    @classmethod
    def from_list(cls, items) -> "AdmissionSchema":
        return cls(tuple(AdmissionFeature.from_dict(d) for d in items))


@dataclass(frozen=True, eq=False)
class AdmissionVector:
    """Encoded admission features of one patient plus the raw values."""

    raw: dict
    features: np.ndarray
    schema: AdmissionSchema

    @classmethod
    def from_raw(cls, raw: dict, schema: AdmissionSchema) -> "AdmissionVector":
        features = schema.encode(raw)
        return cls(raw=schema.normalize_raw(raw), features=features, schema=schema)

    def with_overrides(self, overrides: dict) -> "AdmissionVector":
        unknown = sorted(set(overrides) - set(self.schema.names))
        if unknown:
            raise CohortError(
                f"unknown admission features {unknown}; valid names: {self.schema.names}"
            )
        raw = dict(self.raw)
        raw.update(overrides)
        return AdmissionVector.from_raw(raw, self.schema)


# ---------------------------------------------------------------------------
# patients


@dataclass(frozen=True)
class Observation:
    stream_index: int
    time: float
    value: float


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One patient: observations stored column-wise, sorted by (time, stream)."""

    id: str
    stream: np.ndarray
    time: np.ndarray
    value: np.ndarray
    admission: AdmissionVector
    stay_length_hours: float
    outcome: int

    def __post_init__(self):
        stream = np.asarray(self.stream, dtype=np.int64)
        time = np.asarray(self.time, dtype=float)
        value = np.asarray(self.value, dtype=float)
        if not (stream.shape == time.shape == value.shape) or stream.ndim != 1:
            raise CohortError(f"patient {self.id}: observation arrays misaligned")
        if stream.size == 0:
            raise CohortError(f"patient {self.id}: no observations")
        if not (self.stay_length_hours > 0 and math.isfinite(self.stay_length_hours)):
            raise CohortError(f"patient {self.id}: stay_length_hours must be positive")
        if self.outcome not in (0, 1):
            raise CohortError(f"patient {self.id}: outcome must be 0 or 1")
        if np.any(~np.isfinite(time)) or np.any(~np.isfinite(value)):
            raise CohortError(f"patient {self.id}: non-finite observation")
        if np.any(time < 0):
            raise CohortError(f"patient {self.id}: negative observation time")
        if np.any(time > self.stay_length_hours):
            raise CohortError(
                f"patient {self.id}: observation time {time.max()!r} exceeds "
                f"stay_length_hours {self.stay_length_hours!r}"
            )
        order = np.lexsort((stream, time))
        for name, arr in (("stream", stream), ("time", time), ("value", value)):
            arr = arr[order]
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "stay_length_hours", float(self.stay_length_hours))
        object.__setattr__(self, "outcome", int(self.outcome))

    @property
    def n_obs(self) -> int:
        return int(self.stream.size)

    @property
    def observations(self) -> list[Observation]:
        return [
            Observation(int(s), float(t), float(v))
            for s, t, v in zip(self.stream, self.time, self.value)
        ]

    def with_values(self, value, admission=None) -> "PatientRecord":
        return replace(
            self, value=np.asarray(value, dtype=float), admission=admission or self.admission
        )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "stay_length_hours": self.stay_length_hours,
            "outcome": self.outcome,
            "admission": self.admission.raw,
        }


@dataclass(frozen=True, eq=False)
class Cohort:
    patients: tuple[PatientRecord, ...]
    stream_names: tuple[str, ...]
    schema: AdmissionSchema

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "stream_names", tuple(self.stream_names))
        if len(set(self.stream_names)) != len(self.stream_names) or not self.stream_names:
            raise CohortError("stream names must be non-empty and unique")
        ids = [p.id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate patient ids")
        for p in self.patients:
            if p.admission.schema != self.schema:
                raise CohortError(f"patient {p.id}: admission schema differs from cohort")
            if p.stream.max() >= self.D:
                raise CohortError(f"patient {p.id}: stream index out of range")

    @property
    def D(self) -> int:
        return len(self.stream_names)

    @property
    def S(self) -> int:
        return self.schema.S

    @property
    def N(self) -> int:
        return len(self.patients)

    def __len__(self):
        return len(self.patients)

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.outcome for p in self.patients], dtype=int)

    def subset(self, indices: Iterable[int]) -> "Cohort":
        return replace(self, patients=tuple(self.patients[i] for i in indices))

    def stable(self) -> "Cohort":
        """Patients with outcome 0."""
        return self.subset(i for i, p in enumerate(self.patients) if p.outcome == 0)

    def deteriorating(self) -> "Cohort":
        """Patients with outcome 1."""
        return self.subset(i for i, p in enumerate(self.patients) if p.outcome == 1)

    def admission_matrix(self) -> np.ndarray:
        if not self.patients:
            return np.zeros((0, self.S))
        return np.vstack([p.admission.features for p in self.patients])

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(patients_text(self).encode())
        h.update(measurements_text(self).encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# file i/o


def _header_dict(stream_names, schema) -> dict:
    return {"stream_names": list(stream_names), "admission_schema": schema.to_list()}


def patients_text(cohort: Cohort) -> str:
    lines = [json.dumps(_header_dict(cohort.stream_names, cohort.schema))]
    lines.extend(json.dumps(p.to_dict()) for p in cohort.patients)
    return "\n".join(lines) + "\n"


def measurements_text(cohort: Cohort) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MEASUREMENT_HEADER)
    for p in cohort.patients:
        for s, t, v in zip(p.stream, p.time, p.value):
            w.writerow([p.id, cohort.stream_names[s], format_float(t), format_float(v)])
    return buf.getvalue()


def save_cohort(cohort: Cohort, out_dir) -> tuple[Path, Path]:
    """Write ``measurements.csv`` and ``patients.jsonl`` into ``out_dir``."""
    out_dir = Path(out_dir)
    mpath, ppath = out_dir / MEASUREMENTS_FILE, out_dir / PATIENTS_FILE
    atomic_write_text(ppath, patients_text(cohort))
    atomic_write_text(mpath, measurements_text(cohort))
    return mpath, ppath


def _parse_header(obj, path, line):
    if not isinstance(obj, dict) or "stream_names" not in obj:
        raise CohortParseError(path, line, "first line must be a cohort header with stream_names")
    try:
        schema = AdmissionSchema.from_list(obj.get("admission_schema", []))
    except (KeyError, TypeError) as exc:
        raise CohortParseError(path, line, f"bad admission_schema: {exc}") from None
    except CohortError as exc:
        raise CohortParseError(path, line, str(exc)) from None
    return tuple(str(s) for s in obj["stream_names"]), schema


def _parse_patient_meta(obj, schema, path, line):
    try:
        pid = str(obj["id"])
        stay = float(obj["stay_length_hours"])
        outcome = int(obj["outcome"])
        admission = AdmissionVector.from_raw(obj["admission"], schema)
    except (KeyError, TypeError, ValueError) as exc:
        raise CohortParseError(path, line, f"bad patient record: {exc}") from None
    if outcome not in (0, 1):
        raise CohortParseError(path, line, f"patient {pid}: outcome must be 0 or 1")
    if not stay > 0:
        raise CohortParseError(path, line, f"patient {pid}: stay_length_hours must be positive")
    return pid, stay, outcome, admission


def read_patients(patients_path):
    """Parse a patients file into (stream_names, schema, list of metadata tuples)."""
    path = Path(patients_path)
    stream_names, schema, metas = None, None, []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise CohortParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if stream_names is None:
                stream_names, schema = _parse_header(obj, path, lineno)
                continue
            metas.append(_parse_patient_meta(obj, schema, path, lineno))
    if stream_names is None:
        raise CohortParseError(path, 1, "empty patients file")
    return stream_names, schema, metas


def load_cohort(measurements_path, patients_path) -> Cohort:
    """Read a cohort from a measurements file and a patients file.

    Raises
    ------
    CohortParseError
        Malformed rows (the message carries the line number), rows citing an
        unknown patient or stream, or observations outside ``[0, stay]``.
    CohortError
        Patients without any observation.
    """
    stream_names, schema, metas = read_patients(patients_path)
    stream_index = {name: i for i, name in enumerate(stream_names)}
    meta_by_id = {}
    for m in metas:
        if m[0] in meta_by_id:
            raise CohortError(f"{patients_path}: duplicate patient id {m[0]!r}")
        meta_by_id[m[0]] = m
    obs = {pid: ([], [], []) for pid in meta_by_id}

    mpath = Path(measurements_path)
    with open(mpath, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MEASUREMENT_HEADER:
            raise CohortParseError(mpath, 1, f"expected header {','.join(MEASUREMENT_HEADER)}")
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise CohortParseError(mpath, lineno, f"expected 4 fields, got {len(row)}")
            pid, sname, t_txt, v_txt = row
            if pid not in meta_by_id:
                raise CohortParseError(mpath, lineno, f"unknown patient id {pid!r}")
            if sname not in stream_index:
                raise CohortParseError(
                    mpath, lineno, f"unknown stream {sname!r}; declared: {list(stream_names)}"
                )
            try:
                t, v = float(t_txt), float(v_txt)
            except ValueError:
                raise CohortParseError(mpath, lineno, "time/value not numeric") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise CohortParseError(mpath, lineno, "non-finite time or value")
            stay = meta_by_id[pid][1]
            if t < 0:
                raise CohortParseError(mpath, lineno, f"patient {pid}: negative time {t_txt}")
            if t > stay:
                raise CohortParseError(
                    mpath, lineno, f"patient {pid}: time {t_txt} exceeds stay_length_hours {stay!r}"
                )
            s_list, t_list, v_list = obs[pid]
            s_list.append(stream_index[sname])
            t_list.append(t)
            v_list.append(v)

    patients = []
    for pid, stay, outcome, admission in metas:
        s_list, t_list, v_list = obs[pid]
        if not s_list:
            raise CohortError(f"patient {pid}: no observations")
        patients.append(
            PatientRecord(
                id=pid,
                stream=np.array(s_list),
                time=np.array(t_list),
                value=np.array(v_list),
                admission=admission,
                stay_length_hours=stay,
                outcome=outcome,
            )
        )
    return Cohort(tuple(patients), stream_names, schema)


def load_cohort_dir(path) -> Cohort:
    path = Path(path)
    return load_cohort(path / MEASUREMENTS_FILE, path / PATIENTS_FILE)


def patient_document(patient: PatientRecord, stream_names, schema) -> dict:
    """Self-contained single-patient document (header + observations)."""
    doc = _header_dict(stream_names, schema)
    rec = patient.to_dict()
    rec["observations"] = [
        [stream_names[s], float(t), float(v)]
        for s, t, v in zip(patient.stream, patient.time, patient.value)
    ]
    doc["patient"] = rec
    return doc


def save_patient_file(patient: PatientRecord, stream_names, schema, path) -> None:
    atomic_write_text(path, json.dumps(patient_document(patient, stream_names, schema)) + "\n")


def load_patient_file(path) -> Cohort:
    """Read a single-patient JSON document as a one-patient cohort."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CohortParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    stream_names, schema = _parse_header(doc, path, 1)
    rec = doc.get("patient")
    if not isinstance(rec, dict):
        raise CohortParseError(path, 1, "missing 'patient' record")
    pid, stay, outcome, admission = _parse_patient_meta(rec, schema, path, 1)
    idx = {n: i for i, n in enumerate(stream_names)}
    s_list, t_list, v_list = [], [], []
    for item in rec.get("observations", []):
        name, t, v = item
        if name not in idx:
            raise CohortError(f"{path}: unknown stream {name!r}; declared: {list(stream_names)}")
        s_list.append(idx[name])
        t_list.append(float(t))
        v_list.append(float(v))
    if not s_list:
        raise CohortError(f"patient {pid}: no observations")
    p = PatientRecord(pid, np.array(s_list), np.array(t_list), np.array(v_list), admission, stay, outcome)
    return Cohort((p,), stream_names, schema)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    stream_mean: np.ndarray
    stream_std: np.ndarray
    admission_mean: np.ndarray
    admission_std: np.ndarray
    floored_streams: tuple[int, ...] = field(default=())

    @property
    def D(self) -> int:
        return self.stream_mean.size

    @property
    def S(self) -> int:
        return self.admission_mean.size

    @classmethod
    def identity(cls, D: int, S: int) -> "NormalizationStats":
        return cls(np.zeros(D), np.ones(D), np.zeros(S), np.ones(S))

    def to_dict(self) -> dict:
        return {
            "stream_mean": [float(x) for x in self.stream_mean],
            "stream_std": [float(x) for x in self.stream_std],
            "admission_mean": [float(x) for x in self.admission_mean],
            "admission_std": [float(x) for x in self.admission_std],
            "floored_streams": list(self.floored_streams),
        }

    @classmethod
    def from_dict(cls, d) -> "NormalizationStats":
        return cls(
            np.array(d["stream_mean"], dtype=float),
            np.array(d["stream_std"], dtype=float),
            np.array(d["admission_mean"], dtype=float),
            np.array(d["admission_std"], dtype=float),
            tuple(d.get("floored_streams", ())),
        )


_SUBSETS = {"stable": (0,), "deteriorating": (1,), "all": (0, 1)}


def fit_normalization(cohort: Cohort, subset: str = "stable") -> NormalizationStats:
    """Per-stream and per-admission-column mean and population std.

    Stats are computed over every observation of the patients whose
    outcome matches ``subset`` (``"stable"``, ``"deteriorating"`` or
    ``"all"``). Constant streams get ``std = 1e-6`` and are listed in
    ``floored_streams``; a :class:`UserWarning` is emitted.
    """
    if subset not in _SUBSETS:
        raise ValueError(f"subset must be one of {sorted(_SUBSETS)}")
    pats = [p for p in cohort.patients if p.outcome in _SUBSETS[subset]]
    if not pats:
        raise CohortError(f"normalization subset {subset!r} is empty")
    streams = np.concatenate([p.stream for p in pats])
    values = np.concatenate([p.value for p in pats])
    counts = np.bincount(streams, minlength=cohort.D)
    absent = [cohort.stream_names[d] for d in range(cohort.D) if counts[d] == 0]
    if absent:
        raise CohortError(f"streams absent from subset {subset!r}: {absent}")
    mean = np.bincount(streams, weights=values, minlength=cohort.D) / counts
    centered = values - mean[streams]
    std = np.sqrt(np.bincount(streams, weights=centered**2, minlength=cohort.D) / counts)
    floored = tuple(int(d) for d in np.flatnonzero(std < STD_FLOOR))
    if floored:
        warnings.warn(
            f"constant streams {[cohort.stream_names[d] for d in floored]}; std floored to {STD_FLOOR}",
            stacklevel=2,
        )
        std = np.where(std < STD_FLOOR, STD_FLOOR, std)

    A = np.vstack([p.admission.features for p in pats])
    numeric = cohort.schema.numeric_mask()
    a_mean = np.where(numeric, A.mean(axis=0), 0.0)
    a_std = np.where(numeric, A.std(axis=0), 1.0)
    a_std = np.where(a_std < STD_FLOOR, 1.0, a_std)
    return NormalizationStats(mean, std, a_mean, a_std, floored)


def _check_dims(D, S, stats: NormalizationStats):
    if stats.D != D or stats.S != S:
        raise CohortError(f"normalization stats are (D={stats.D}, S={stats.S}); data is (D={D}, S={S})")


def normalize_patient(patient: PatientRecord, stats: NormalizationStats, inverse=False) -> PatientRecord:
    if patient.stream.max() >= stats.D or patient.admission.features.size != stats.S:
        raise CohortError(f"patient {patient.id}: dimensions do not match normalization stats")
    mu, sd = stats.stream_mean[patient.stream], stats.stream_std[patient.stream]
    if inverse:
        values = patient.value * sd + mu
        feats = patient.admission.features * stats.admission_std + stats.admission_mean
    else:
        values = (patient.value - mu) / sd
        feats = (patient.admission.features - stats.admission_mean) / stats.admission_std
    admission = replace(patient.admission, features=feats)
    return patient.with_values(values, admission)


def apply_normalization(cohort: Cohort, stats: NormalizationStats) -> Cohort:
    """Map stream values to z-units and standardize numeric admission columns."""
    _check_dims(cohort.D, cohort.S, stats)
    return replace(cohort, patients=tuple(normalize_patient(p, stats) for p in cohort.patients))


def invert_normalization(cohort: Cohort, stats: NormalizationStats) -> Cohort:
    _check_dims(cohort.D, cohort.S, stats)
    return replace(
        cohort, patients=tuple(normalize_patient(p, stats, inverse=True) for p in cohort.patients)
    )


def split_by_outcome(cohort: Cohort) -> tuple[list[int], list[int]]:
    """Indices of stable and deteriorating patients."""
    labels = cohort.labels
    return list(np.flatnonzero(labels == 0)), list(np.flatnonzero(labels == 1))


def make_cohort(patients: Sequence[PatientRecord], stream_names, schema) -> Cohort:
    return Cohort(tuple(patients), tuple(stream_names), schema)
