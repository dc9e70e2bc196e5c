"""Cross-validated evaluation: stratified folds, ROC AUC, TPR/PPV curves, baselines."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from .cohort import Cohort, CohortError, format_float
from .pipeline import TrainConfig, train_bundle
from .scoring import endpoint_score

logger = logging.getLogger(__name__)

LOGISTIC_FEATURES = ("mean", "std", "min", "max", "last")


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ScoredOutcome:
    patient_id: str
    score: float
    label: int

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError(f"patient {self.patient_id}: non-finite score")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    class_counts: tuple  # per fold: (negatives, positives)

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        test = self.folds[fold]
        train = np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))
        return train, test


def stratified_kfold(cohort_or_labels, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle within each class, then round-robin over the folds.

    The fold counter carries over from the negatives to the positives, so
    fold sizes differ by at most one overall as well as per class.
    """
    labels = cohort_or_labels.labels if isinstance(cohort_or_labels, Cohort) else np.asarray(cohort_or_labels, int)
    if k < 2:
        raise ValueError("k must be >= 2")
    rng = np.random.default_rng(seed)
    assign = np.empty(labels.size, dtype=int)
    start = 0
    for cls in (0, 1):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise CohortError(f"cannot stratify: class {cls} has {members.size} members, fewer than k={k}")
        members = rng.permutation(members)
        assign[members] = (start + np.arange(members.size)) % k
        start = (start + members.size) % k
    folds = tuple(np.flatnonzero(assign == f) for f in range(k))
    counts = tuple((int(np.sum(labels[f] == 0)), int(np.sum(labels[f] == 1))) for f in folds)
    return FoldPlan(folds, counts)


def _scores_labels(outcomes, labels=None):
    if labels is None:
        scores = np.array([o.score for o in outcomes], dtype=float)
        labels = np.array([o.label for o in outcomes], dtype=int)
    else:
        scores = np.asarray(outcomes, dtype=float)
        labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must align")
    if not (np.any(labels == 1) and np.any(labels == 0)):
        raise ValueError("both classes must be present")
    return scores, labels


def roc_auc(outcomes, labels=None) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Accepts a sequence of :class:`ScoredOutcome` or parallel score/label arrays.
    """
    scores, labels = _scores_labels(outcomes, labels)
    neg = np.sort(scores[labels == 0])
    pos = scores[labels == 1]
    below = np.searchsorted(neg, pos, side="left")
    ties = np.searchsorted(neg, pos, side="right") - below
    twice = 2 * int(below.sum()) + int(ties.sum())
    return twice / (2.0 * pos.size * neg.size)


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    tpr: float
    ppv: float
    tp: int
    fp: int
    fn: int
    tn: int


def tpr_ppv_curve(outcomes, labels=None) -> list[CurvePoint]:
    """One operating point per distinct score; an alarm fires when ``score >= threshold``."""
    scores, labels = _scores_labels(outcomes, labels)
    P = int(labels.sum())
    N = labels.size - P
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp_cum = np.cumsum(y)
    fp_cum = np.cumsum(1 - y)
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]  # end of each tie group
    points = []
    for j in last[::-1]:  # increasing threshold
        tp, fp = int(tp_cum[j]), int(fp_cum[j])
        points.append(CurvePoint(float(s[j]), tp / P, tp / (tp + fp), tp, fp, P - tp, N - fp))
    return points


def curve_text(points: Sequence[CurvePoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "tpr", "ppv", "tp", "fp", "fn", "tn"])
    for p in points:
        w.writerow([format_float(p.threshold), format_float(p.tpr), format_float(p.ppv), p.tp, p.fp, p.fn, p.tn])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# baselines


def summary_features(cohort: Cohort) -> np.ndarray:
    """Per-stream mean, std, min, max and last value, then the encoded admission
    (intercept column dropped). Streams a patient never measured are NaN."""
    D = cohort.D
    rows = []
    for p in cohort.patients:
        feats = np.full((D, len(LOGISTIC_FEATURES)), np.nan)
        for d in range(D):
            v = p.value[p.stream == d]
            if v.size:
                feats[d] = (v.mean(), v.std(), v.min(), v.max(), v[-1])
        rows.append(np.concatenate([feats.ravel(), p.admission.features[1:]]))
    return np.vstack(rows)


@dataclass
class LogisticModel:
    intercept: float
    weights: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    iterations: int
    converged: bool

    def transform(self, X) -> np.ndarray:
        X = np.where(np.isnan(X), self.center, X)
        return (X - self.center) / self.scale

    def predict(self, X) -> np.ndarray:
        return expit(self.intercept + self.transform(X) @ self.weights)


def _logistic_loss(b, w, Z, y):
    z = b + Z @ w
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def fit_logistic(X, y, l1_penalty: float = 0.0, max_iter: int = 5000, tol: float = 1e-7) -> LogisticModel:
    """L1-penalized logistic regression by proximal gradient with backtracking.

    The intercept is not penalized. Every accepted step satisfies the
    sufficient-decrease condition, so the objective never increases. The fit
    stops once the proximal gradient mapping is below ``tol`` in max-norm.
    """
    if l1_penalty < 0:
        raise ValueError("l1_penalty must be non-negative")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    center = np.nanmean(X, axis=0)
    center = np.where(np.isnan(center), 0.0, center)
    Xf = np.where(np.isnan(X), center, X)
    scale = Xf.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    Z = (Xf - center) / scale
    n, p = Z.shape
    b, w = 0.0, np.zeros(p)
    step = 1.0
    f = _logistic_loss(b, w, Z, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r = expit(b + Z @ w) - y
        gb, gw = r.mean(), Z.T @ r / n
        while True:
            nb = b - step * gb
            u = w - step * gw
            nw = np.sign(u) * np.maximum(np.abs(u) - step * l1_penalty, 0.0)
            nf = _logistic_loss(nb, nw, Z, y)
            db, dw = nb - b, nw - w
            if nf <= f + gb * db + gw @ dw + (db * db + dw @ dw) / (2 * step) + 1e-15:
                break
            step *= 0.5
        # norm of the proximal gradient mapping; zero exactly at the optimum
        done = max(abs(db), np.abs(dw).max(initial=0.0)) / step <= tol
        b, w, f = nb, nw, nf
        step = min(2.0 * step, 1e6)
        if done:
            converged = True
            break
    if not converged:
        warnings.warn(f"logistic fit hit the iteration cap ({max_iter}); returning the last iterate", ConvergenceWarning, stacklevel=2)
    return LogisticModel(b, w, center, scale, it, converged)


def logistic_baseline(train: Cohort, test: Cohort, l1_penalty: float = 0.0, **kw) -> list[ScoredOutcome]:
    """Logistic regression on summary features; returns test-set outcomes."""
    if train.stream_names != test.stream_names or train.schema != test.schema:
        raise CohortError("train and test cohorts must share streams and admission schema")
    model = fit_logistic(summary_features(train), train.labels, l1_penalty, **kw)
    probs = model.predict(summary_features(test))
    return [ScoredOutcome(p.id, float(s), p.outcome) for p, s in zip(test.patients, probs)]


def score_table_baseline(cohort: Cohort, table: dict) -> list[ScoredOutcome]:
    """Points-table early-warning score on each stream's last value.

    ``table`` maps a stream name to ``[(low, high, points), ...]`` bands
    (``low <= x < high``; ``None`` means unbounded). The summed points are
    divided by the largest attainable total so the score lies in [0, 1].
    """
    unknown = set(table) - set(cohort.stream_names)
    if unknown:
        raise CohortError(f"score table names unknown streams: {sorted(unknown)}")
    max_total = sum(max((b[2] for b in bands), default=0) for bands in table.values())
    out = []
    for p in cohort.patients:
        total = 0.0
        for name, bands in table.items():
            v = p.value[p.stream == cohort.stream_names.index(name)]
            if not v.size:
                continue
            x = v[-1]
            for low, high, points in bands:
                if (low is None or x >= low) and (high is None or x < high):
                    total += points
                    break
        out.append(ScoredOutcome(p.id, total / max_total if max_total > 0 else 0.0, p.outcome))
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVReport:
    k: int
    seed: int
    endpoint: str
    models: tuple
    folds: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)

    def fold_aucs(self, model: str) -> np.ndarray:
        return np.array([f["auc"][model] for f in self.folds])

    def pooled_auc(self, model: str) -> float:
        return roc_auc(self.outcomes[model])

    def curve(self, model: str) -> list[CurvePoint]:
        return tpr_ppv_curve(self.outcomes[model])

    def summary(self) -> dict:
        out = {}
        for m in self.models:
            aucs = self.fold_aucs(m)
            out[m] = {
                "pooled_auc": self.pooled_auc(m),
                "mean_auc": float(aucs.mean()),
                "std_auc": float(aucs.std(ddof=1)) if aucs.size > 1 else 0.0,
            }
        return out

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "endpoint": self.endpoint, "folds": self.folds, "summary": self.summary()}

    def fold_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", "n_train", "n_test", "n_pos_test"] + [f"M_{m}" for m in self.models] + [f"auc_{m}" for m in self.models])
        for f in self.folds:
            w.writerow(
                [f["fold"], f["n_train"], f["n_test"], f["n_pos_test"]]
                + [f["selected_M"].get(m, "") for m in self.models]
                + [format_float(f["auc"][m]) for m in self.models]
            )
        return buf.getvalue()


def shuffled_labels(cohort: Cohort, seed: int) -> Cohort:
    """Same patients with outcomes permuted (a null for the whole pipeline)."""
    perm = np.random.default_rng(seed).permutation(cohort.labels)
    return replace(cohort, patients=tuple(replace(p, outcome=int(y)) for p, y in zip(cohort.patients, perm)))


def run_cv_experiment(
    cohort: Cohort,
    config: TrainConfig | None = None,
    k: int = 10,
    seed: int = 0,
    force_m: int | None = None,
    baseline: str | None = None,
    l1_penalty: float = 0.0,
    endpoint: str = "final",
    shuffle_labels: bool = False,
    lookback: float | None = None,
    progress=None,
) -> CVReport:
    """Stratified k-fold evaluation of the full pipeline.

    Model ``"model"`` uses ``config`` as given; ``force_m=m`` adds the
    ablation ``"m<m>"`` with exactly ``m`` experts and ``baseline="logistic"``
    adds ``"logistic"``. Fold ``f`` trains with seed ``1000 * seed + f``.
    """
    config = config or TrainConfig()
    if baseline not in (None, "logistic"):
        raise ValueError("baseline must be None or 'logistic'")
    if endpoint not in ("final", "max"):
        raise ValueError("endpoint must be 'final' or 'max'")
    if shuffle_labels:
        cohort = shuffled_labels(cohort, seed)
    plan = stratified_kfold(cohort, k, seed)
    configs = {"model": config}
    if force_m is not None:
        configs[f"m{force_m}"] = replace(config, force_m=force_m)
    models = tuple(configs) + (("logistic",) if baseline else ())
    report = CVReport(k, seed, endpoint, models, outcomes={m: [] for m in models})
    for f in range(k):
        train_idx, test_idx = plan.train_test(f)
        train, test = cohort.subset(train_idx), cohort.subset(test_idx)
        row = {
            "fold": f,
            "n_train": len(train_idx),
            "n_test": len(test_idx),
            "n_pos_test": int(test.labels.sum()),
            "selected_M": {},
            "auc": {},
        }
        for name, cfg in configs.items():
            bundle, summary = train_bundle(train, replace(cfg, seed=1000 * seed + f))
            outs = [ScoredOutcome(p.id, endpoint_score(p, bundle, endpoint, lookback), p.outcome) for p in test.patients]
            row["selected_M"][name] = summary.selected_M
            row["auc"][name] = roc_auc(outs)
            report.outcomes[name].extend(outs)
        if baseline:
            outs = logistic_baseline(train, test, l1_penalty)
            row["auc"]["logistic"] = roc_auc(outs)
            report.outcomes["logistic"].extend(outs)
        report.folds.append(row)
        msg = f"fold {f + 1}/{k}: " + ", ".join(f"{m} AUC={row['auc'][m]:.3f}" for m in models)
        logger.info(msg)
        if progress is not None:
            progress(msg)
    return report
