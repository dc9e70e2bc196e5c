"""Transfer of the stable-domain class structure.

* :func:`fit_responsibility_regression` learns a linear map from encoded
  admission features to expert responsibilities.
* :func:`self_taught_partition` draws Bernoulli memberships of the
  deteriorating patients from their predicted responsibilities.
* :func:`train_deteriorating_experts` fits one windowed GP per expert,
  anchored at each patient's ICU admission time.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cohort import AdmissionSchema, AdmissionVector, CohortError
from .mixture import StableMixture
from .mtgp import OptimizerConfig, WindowedGPParams, fit_windowed_mle

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS = 4
DEFAULT_WINDOW_WIDTH = 12.0


class RankDeficientWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class ResponsibilityRegressor:
    """Linear responsibility model ``beta_hat = W^T y``.

    ``weights`` is ``S x M``; ``rss`` holds the per-column residual sum of
    squares on the training data.
    """

    weights: np.ndarray
    schema: AdmissionSchema
    rss: np.ndarray = field(default=None)
    ridge: float = 0.0

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        if W.ndim != 2 or W.shape[0] != self.schema.S:
            raise ValueError(f"weights must be {self.schema.S} x M")
        object.__setattr__(self, "weights", W)
        rss = np.zeros(W.shape[1]) if self.rss is None else np.asarray(self.rss, dtype=float)
        object.__setattr__(self, "rss", rss)

    @property
    def M(self) -> int:
        return self.weights.shape[1]

    def raw_predict(self, features) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_list(),
            "columns": self.schema.column_names(),
            "weights": [[float(x) for x in row] for row in self.weights],
            "rss": [float(x) for x in self.rss],
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, d) -> "ResponsibilityRegressor":
        return cls(np.array(d["weights"], dtype=float), AdmissionSchema.from_list(d["schema"]), np.array(d["rss"]), d.get("ridge", 0.0))


def _design(admissions) -> tuple[np.ndarray, AdmissionSchema | None]:
    if isinstance(admissions, np.ndarray):
        return np.asarray(admissions, dtype=float), None
    admissions = list(admissions)
    schema = admissions[0].schema
    if any(a.schema != schema for a in admissions):
        raise CohortError("admission vectors use different schemas")
    return np.vstack([a.features for a in admissions]), schema


def fit_responsibility_regression(admissions, responsibilities, schema: AdmissionSchema | None = None) -> ResponsibilityRegressor:
    """Per-column least squares of the responsibilities on encoded admissions.

    ``admissions`` is a sequence of :class:`AdmissionVector` or an ``N x S``
    design matrix (then ``schema`` is required). A rank-deficient design
    switches to ridge regression with ``lambda = 1e-6 trace(X^T X) / S`` and
    emits :class:`RankDeficientWarning`.
    """
    X, found = _design(admissions)
    schema = schema or found
    if schema is None:
        raise ValueError("schema is required with a raw design matrix")
    Y = np.asarray(responsibilities, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ValueError("responsibilities must be N x M aligned with admissions")
    N, S = X.shape
    ridge = 0.0
    if np.linalg.matrix_rank(X) < S:
        gram = X.T @ X
        ridge = 1e-6 * np.trace(gram) / S
        warnings.warn(
            f"admission design is rank-deficient (rank < {S}); using ridge lambda={ridge:.3g}",
            RankDeficientWarning,
            stacklevel=2,
        )
        W = np.linalg.solve(gram + ridge * np.eye(S), X.T @ Y)
    else:
        if N <= S:
            raise ValueError(f"need more patients ({N}) than encoded features ({S})")
        W = np.linalg.lstsq(X, Y, rcond=None)[0]
    rss = np.sum((Y - X @ W) ** 2, axis=0)
    return ResponsibilityRegressor(W, schema, rss, ridge)


def clip_normalize(raw) -> np.ndarray:
    """Clip at zero and renormalize; all-zero rows become uniform."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    clipped = np.clip(raw, 0.0, None)
    totals = clipped.sum(axis=1, keepdims=True)
    M = raw.shape[1]
    out = np.where(totals > 0, clipped / np.where(totals > 0, totals, 1.0), 1.0 / M)
    return out


def predict_responsibilities(reg: ResponsibilityRegressor, admission) -> np.ndarray:
    """Length-M simplex vector for one admission (or ``N x M`` for a matrix)."""
    if isinstance(admission, AdmissionVector):
        if admission.schema != reg.schema:
            raise CohortError("admission schema does not match the regressor's manifest")
        return clip_normalize(reg.raw_predict(admission.features))[0]
    X = np.asarray(admission, dtype=float)
    if X.shape[-1] != reg.schema.S:
        raise CohortError(f"expected {reg.schema.S} encoded admission columns")
    out = clip_normalize(reg.raw_predict(X))
    return out[0] if X.ndim == 1 else out


def self_taught_partition(beta_hat, seed: int) -> list[np.ndarray]:
    """Independent ``Bernoulli(beta_hat[i, m])`` membership draws.

    Returns, for every expert, the sorted indices of the rows drawn into it.
    """
    beta = np.asarray(beta_hat, dtype=float)
    if beta.ndim != 2:
        raise ValueError("beta_hat must be N x M")
    rng = np.random.default_rng(seed)
    draws = rng.random(beta.shape) < beta
    return [np.flatnonzero(draws[:, m]) for m in range(beta.shape[1])]


@dataclass(frozen=True, eq=False)
class DeterioratingExpertSet:
    experts: tuple[WindowedGPParams, ...]
    counts: tuple[int, ...]
    seed: int
    trained: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        trained = tuple(self.trained) or tuple(c > 0 for c in self.counts)
        object.__setattr__(self, "trained", trained)
        if not (len(self.experts) == len(self.counts) == len(trained)):
            raise ValueError("experts, counts and trained flags must align")

    @property
    def M(self) -> int:
        return len(self.experts)

    def permuted(self, order) -> "DeterioratingExpertSet":
        order = list(order)
        return DeterioratingExpertSet(
            tuple(self.experts[i] for i in order),
            tuple(self.counts[i] for i in order),
            self.seed,
            tuple(self.trained[i] for i in order),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "counts": list(self.counts),
            "trained": list(self.trained),
            "experts": [e.to_dict() for e in self.experts],
        }

    @classmethod
    def from_dict(cls, d) -> "DeterioratingExpertSet":
        return cls(
            tuple(WindowedGPParams.from_dict(e) for e in d["experts"]),
            tuple(d["counts"]),
            d["seed"],
            tuple(d["trained"]),
        )


def train_deteriorating_experts(
    blocks: Sequence,
    anchors,
    partition: Sequence[np.ndarray],
    stable_mixture: StableMixture,
    n_windows: int = DEFAULT_WINDOWS,
    width: float = DEFAULT_WINDOW_WIDTH,
    opt_cfg: OptimizerConfig | None = None,
    seed: int = 0,
) -> DeterioratingExpertSet:
    """Fit expert ``m``'s windowed GP on the blocks of ``partition[m]``.

    An empty partition yields the stable expert copied into every window,
    flagged untrained. Windows of a trained expert that receive no data also
    fall back to the stable expert.
    """
    if len(partition) != stable_mixture.M:
        raise ValueError("partition must have one index set per expert")
    anchors = np.asarray(anchors, dtype=float)
    experts, counts = [], []
    for m, idx in enumerate(partition):
        stable = stable_mixture.experts[m]
        idx = np.asarray(idx, dtype=int)
        counts.append(idx.size)
        if idx.size == 0:
            logger.info("expert %d: empty self-taught partition, copying the stable expert", m)
            experts.append(WindowedGPParams.constant(stable, n_windows, width, trained=False))
            continue
        experts.append(
            fit_windowed_mle(
                [blocks[i] for i in idx],
                anchors[idx],
                np.ones(idx.size),
                W=n_windows,
                width=width,
                opt_cfg=opt_cfg,
                fallback=stable,
                D=stable.D,
            )
        )
    return DeterioratingExpertSet(tuple(experts), tuple(counts), seed)
