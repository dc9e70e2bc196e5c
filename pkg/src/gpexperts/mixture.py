"""EM training of a mixture of stationary GP experts and BIC selection of M."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .mtgp import (
    BlockBatch,
    ObservationBlock,
    OptimizerConfig,
    StationaryGPParams,
    fit_weighted_mle,
    initial_params,
)

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-3
DEFAULT_MAX_ITER = 50
DEFAULT_B_BAR = 3.0
DEFAULT_M_MAX = 10


@dataclass(frozen=True, eq=False)
class StableMixture:
    experts: tuple[StationaryGPParams, ...]
    weights: np.ndarray

    def __post_init__(self):
        experts = tuple(self.experts)
        w = np.asarray(self.weights, dtype=float)
        if not experts or w.shape != (len(experts),):
            raise ValueError("need one weight per expert and at least one expert")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        object.__setattr__(self, "experts", experts)
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return len(self.experts)

    @property
    def D(self) -> int:
        return self.experts[0].D

    def permuted(self, order) -> "StableMixture":
        return StableMixture(tuple(self.experts[i] for i in order), self.weights[list(order)])

    def to_dict(self) -> dict:
        return {"weights": [float(x) for x in self.weights], "experts": [e.to_dict() for e in self.experts]}

    @classmethod
    def from_dict(cls, d) -> "StableMixture":
        return cls(tuple(StationaryGPParams.from_dict(e) for e in d["experts"]), np.array(d["weights"]))


@dataclass
class EMReport:
    M: int
    q_star: float
    loglik: float
    iterations: int
    converged: bool
    q_history: list = field(default_factory=list)
    q_before_history: list = field(default_factory=list)
    loglik_history: list = field(default_factory=list)
    delta_history: list = field(default_factory=list)
    starved: tuple = ()
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "q_star": self.q_star,
            "loglik": self.loglik,
            "iterations": self.iterations,
            "converged": self.converged,
            "q_history": list(self.q_history),
            "q_before_history": list(self.q_before_history),
            "loglik_history": list(self.loglik_history),
            "delta_history": list(self.delta_history),
            "starved": list(self.starved),
            "seed": self.seed,
        }


def _as_batch(blocks, D=None) -> BlockBatch:
    return blocks if isinstance(blocks, BlockBatch) else BlockBatch(list(blocks), D=D)


def expert_loglik(blocks, experts: Sequence[StationaryGPParams]) -> np.ndarray:
    """``(N, M)`` matrix of per-patient log-densities under each expert."""
    batch = _as_batch(blocks, D=experts[0].D)
    return np.column_stack([batch.loglik(e) for e in experts])


def _log_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(w)


def responsibilities_from_loglik(ll: np.ndarray, weights) -> np.ndarray:
    joint = ll + _log_weights(weights)
    resp = np.exp(joint - logsumexp(joint, axis=1, keepdims=True))
    assert np.all(np.isfinite(resp)), "responsibility underflow"
    return resp


def e_step(blocks, mixture: StableMixture) -> np.ndarray:
    """Posterior class memberships ``beta[i, m]``, computed in the log domain."""
    return responsibilities_from_loglik(expert_loglik(blocks, mixture.experts), mixture.weights)


def expected_complete_loglik(ll: np.ndarray, weights, resp: np.ndarray) -> float:
    """``Q = sum_i sum_m beta_im (log pi_m + log f_m(x_i))``; zero-responsibility terms vanish."""
    joint = ll + _log_weights(weights)
    with np.errstate(invalid="ignore"):
        return float(np.sum(np.where(resp > 0, resp * joint, 0.0)))


def observed_loglik(ll: np.ndarray, weights) -> float:
    return float(np.sum(logsumexp(ll + _log_weights(weights), axis=1)))


def m_step(
    blocks,
    resp: np.ndarray,
    prev: StableMixture | None,
    opt_cfg: OptimizerConfig | None = None,
    D: int | None = None,
):
    """Closed-form mixing weights plus one weighted GP fit per expert.

    Returns ``(mixture, starved)`` where ``starved`` lists experts whose
    total responsibility fell below ``M * 1e-8``; those keep ``prev``'s
    parameters. With ``prev=None`` experts start from data-driven values.
    """
    batch = _as_batch(blocks, D=D if prev is None else prev.D)
    resp = np.asarray(resp, dtype=float)
    N, M = resp.shape
    totals = resp.sum(axis=0)
    pi = totals / N
    pi = pi / pi.sum()
    experts, starved = [], []
    for m in range(M):
        init = prev.experts[m] if prev is not None else None
        if totals[m] < M * 1e-8:
            starved.append(m)
            if init is None:
                init = fit_weighted_mle(batch.blocks, np.ones(N), opt_cfg=opt_cfg, D=batch.D)
            experts.append(init)
            continue
        experts.append(fit_weighted_mle(batch.blocks, resp[:, m], init=init, opt_cfg=opt_cfg, D=batch.D))
    return StableMixture(tuple(experts), pi), tuple(starved)


def summary_features(blocks: Sequence[ObservationBlock], D: int) -> np.ndarray:
    """Per-patient per-stream mean and std; missing streams get the column mean."""
    feats = np.full((len(blocks), 2 * D), np.nan)
    for i, b in enumerate(blocks):
        for d in range(D):
            vals = b.value[b.stream == d]
            if vals.size:
                feats[i, d] = vals.mean()
                feats[i, D + d] = vals.std()
    col_mean = np.nanmean(np.where(np.isnan(feats), np.nan, feats), axis=0)
    col_mean = np.nan_to_num(col_mean)
    idx = np.nonzero(np.isnan(feats))
    feats[idx] = col_mean[idx[1]]
    return feats


def kmeans_assignments(blocks, M: int, D: int, seed: int) -> np.ndarray:
    if M == 1:
        return np.zeros(len(blocks), dtype=int)
    feats = summary_features(blocks, D)
    km = KMeans(n_clusters=M, n_init=10, random_state=seed).fit(feats)
    return km.labels_.astype(int)


def run_em(
    blocks,
    M: int,
    eps: float = DEFAULT_EPS,
    max_iter: int = DEFAULT_MAX_ITER,
    seed: int = 0,
    opt_cfg: OptimizerConfig | None = None,
    D: int | None = None,
    trace=None,
):
    """Fit an ``M``-expert mixture by generalized EM.

    Initialization: seeded k-means on per-patient summary vectors gives hard
    responsibilities, from which the first M-step fits the experts. Each
    iteration then runs an M-step on the previous responsibilities, records
    ``Q`` before and after it (``q_before_history`` / ``q_history``, both
    under ``beta_{p-1}``) and the observed-data log-likelihood, refreshes
    the responsibilities and stops once their mean absolute change is below
    ``eps``.

    Parameters
    ----------
    trace : file-like, optional
        When given, one ``M,iteration,q,loglik,delta`` line per iteration is
        written to it.

    Returns
    -------
    mixture, responsibilities, report
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not eps > 0:
        raise ValueError("eps must be positive")
    blocks = list(blocks.blocks if isinstance(blocks, BlockBatch) else blocks)
    D = D or max(int(b.stream.max()) for b in blocks) + 1
    batch = BlockBatch(blocks, D=D)
    N = len(blocks)

    labels = kmeans_assignments(blocks, M, D, seed)
    resp = np.zeros((N, M))
    resp[np.arange(N), labels] = 1.0

    mixture = StableMixture(
        tuple(
            initial_params(blocks, resp[:, m], D) if resp[:, m].any() else initial_params(blocks, np.ones(N), D)
            for m in range(M)
        ),
        resp.mean(axis=0),
    )
    ll = expert_loglik(batch, mixture.experts)
    q_hist, q_before, ll_hist, delta_hist = [], [], [], []
    starved_any: set = set()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        q_before.append(expected_complete_loglik(ll, mixture.weights, resp))
        mixture, starved = m_step(batch, resp, mixture, opt_cfg=opt_cfg, D=D)
        starved_any.update(starved)
        ll = expert_loglik(batch, mixture.experts)
        q = expected_complete_loglik(ll, mixture.weights, resp)
        if not math.isfinite(q):
            raise FloatingPointError(f"non-finite Q at iteration {it} (M={M})")
        new_resp = responsibilities_from_loglik(ll, mixture.weights)
        delta = float(np.mean(np.abs(new_resp - resp)))
        q_hist.append(q)
        ll_hist.append(observed_loglik(ll, mixture.weights))
        delta_hist.append(delta)
        if trace is not None:
            trace.write(f"{M},{it},{q!r},{ll_hist[-1]!r},{delta!r}\n")
        logger.debug("M=%d iter=%d Q=%.6f delta=%.3g", M, it, q, delta)
        resp = new_resp
        if delta < eps:
            converged = True
            break

    ll = expert_loglik(batch, mixture.experts)
    q_star = expected_complete_loglik(ll, mixture.weights, resp)
    report = EMReport(
        M=M,
        q_star=q_star,
        loglik=observed_loglik(ll, mixture.weights),
        iterations=it,
        converged=converged,
        q_history=q_hist,
        q_before_history=q_before,
        loglik_history=ll_hist,
        delta_history=delta_hist,
        starved=tuple(sorted(starved_any)),
        seed=seed,
    )
    return mixture, resp, report


def model_complexity(M: int, D: int) -> int:
    """Number of free hyper-parameters of ``M`` experts over ``D`` streams."""
    if M < 1 or D < 1:
        raise ValueError("M and D must be >= 1")
    return M * (D * (D + 1) // 2 + D + 2)


def log_bayes_factor(q_m: float, q_prev: float, psi_m: int, psi_prev: int, n_o: int) -> float:
    """BIC approximation of ``log B_{M, M-1}``."""
    if n_o < 1:
        raise ValueError("n_o must be >= 1")
    log_n = math.log(n_o)
    return (q_m - 0.5 * psi_m * log_n) - (q_prev - 0.5 * psi_prev * log_n)


def bayes_factor(q_m: float, q_prev: float, psi_m: int, psi_prev: int, n_o: int) -> float:
    lb = log_bayes_factor(q_m, q_prev, psi_m, psi_prev, n_o)
    try:
        return math.exp(lb)
    except OverflowError:
        return math.inf


@dataclass
class Discovery:
    mixture: StableMixture
    responsibilities: np.ndarray
    reports: dict
    log_bayes_factors: dict
    selected_M: int

    @property
    def M(self) -> int:
        return self.mixture.M


def discover_experts(
    blocks,
    eps: float = DEFAULT_EPS,
    b_bar: float = DEFAULT_B_BAR,
    m_max: int = DEFAULT_M_MAX,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    opt_cfg: OptimizerConfig | None = None,
    D: int | None = None,
    criterion: str = "q",
    trace=None,
) -> Discovery:
    """Grow ``M = 1, 2, ...`` until the Bayes factor ``B_{M, M-1}`` drops below ``b_bar``.

    ``criterion="q"`` compares expected complete-data log-likelihoods;
    ``criterion="loglik"`` uses observed-data log-likelihoods instead.
    A run with a starved expert is retried once with another seed.
    """
    if not (eps > 0 and b_bar > 0 and m_max >= 1):
        raise ValueError("need eps > 0, b_bar > 0, m_max >= 1")
    if criterion not in ("q", "loglik"):
        raise ValueError("criterion must be 'q' or 'loglik'")
    blocks = list(blocks)
    D = D or max(int(b.stream.max()) for b in blocks) + 1
    n_o = len(blocks)
    log_b_bar = math.log(b_bar)

    def fit(M):
        result = run_em(blocks, M, eps, max_iter, seed, opt_cfg, D, trace)
        if result[2].starved:
            logger.info("M=%d: starved experts %s, retrying with a new seed", M, result[2].starved)
            result = run_em(blocks, M, eps, max_iter, seed + 7919 * M, opt_cfg, D, trace)
        return result

    def score(report):
        return report.q_star if criterion == "q" else report.loglik

    best = fit(1)
    reports = {1: best[2]}
    factors = {}
    for M in range(2, m_max + 1):
        cand = fit(M)
        reports[M] = cand[2]
        lb = log_bayes_factor(
            score(cand[2]), score(best[2]), model_complexity(M, D), model_complexity(M - 1, D), n_o
        )
        factors[M] = lb
        logger.info("M=%d log B=%.3f", M, lb)
        if lb < log_b_bar:
            break
        best = cand
    mixture, resp, _ = best
    return Discovery(mixture, resp, reports, factors, mixture.M)
