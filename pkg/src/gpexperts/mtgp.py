"""Multi-task Gaussian-process densities with a separable kernel.

The covariance between stream ``d`` at time ``t`` and stream ``d'`` at
time ``t'`` is ``Sigma[d, d'] * k(t, t')`` where ``k`` is a unit-amplitude
squared-exponential kernel and ``Sigma = L L^T`` is parameterized by its
lower-triangular Cholesky factor. Independent Gaussian noise of variance
``noise_var`` is added on the diagonal.

Likelihoods for many observation blocks are evaluated together by
padding blocks of similar size into stacks (:class:`BlockBatch`); padded
slots carry an identity covariance and a zero residual, so they leave the
log-density and its gradient untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.linalg import lapack

LOG_2PI = math.log(2.0 * math.pi)

JITTER_START = 1e-10
JITTER_MAX = 1e-4

# box on the log-scalars keeps the line search away from degenerate kernels
LOG_LENGTHSCALE_BOUNDS = (math.log(1e-2), math.log(1e4))
LOG_NOISE_STD_BOUNDS = (math.log(1e-4), math.log(1e2))


class CovarianceError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after the maximum jitter."""


class FitDivergenceError(RuntimeError):
    """Non-finite objective during fitting; ``params`` holds the last finite iterate."""

    def __init__(self, message, params):
        super().__init__(message)
        self.params = params


def se_kernel(t, t_prime, lengthscale):
    """Unit-amplitude squared-exponential kernel ``exp(-(t - t')^2 / (2 l^2))``."""
    if not lengthscale > 0:
        raise ValueError(f"lengthscale must be positive, got {lengthscale!r}")
    diff = np.subtract(t, t_prime)
    return np.exp(-0.5 * (diff / lengthscale) ** 2)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True, eq=False)
class StationaryGPParams:
    """Hyper-parameters of one stationary multi-task GP.

    Attributes
    ----------
    mean : (D,) array
        Constant mean per stream.
    chol_factor : (D, D) array
        Lower-triangular ``L`` with positive diagonal; ``Sigma = L L^T``.
    lengthscale : float
        Temporal lengthscale in hours.
    noise_var : float
        Observation noise variance.
    """

    mean: np.ndarray
    chol_factor: np.ndarray
    lengthscale: float
    noise_var: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        L = np.array(self.chol_factor, dtype=float)
        D = mean.size
        if L.shape != (D, D):
            raise ValueError(f"chol_factor must be {D}x{D}, got {L.shape}")
        if np.any(np.triu(L, 1) != 0):
            raise ValueError("chol_factor must be lower-triangular")
        if np.any(np.diag(L) <= 0):
            raise ValueError("chol_factor diagonal must be positive")
        if not (self.lengthscale > 0 and self.noise_var > 0):
            raise ValueError("lengthscale and noise_var must be positive")
        mean.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol_factor", L)
        object.__setattr__(self, "lengthscale", float(self.lengthscale))
        object.__setattr__(self, "noise_var", float(self.noise_var))

    @property
    def D(self) -> int:
        return self.mean.size

    @property
    def sigma(self) -> np.ndarray:
        return self.chol_factor @ self.chol_factor.T

    @property
    def n_free(self) -> int:
        D = self.D
        return D * (D + 1) // 2 + D + 2

    @classmethod
    def isotropic(cls, D, mean=0.0, scale=1.0, lengthscale=6.0, noise_var=0.1):
        return cls(np.broadcast_to(np.asarray(mean, dtype=float), (D,)), scale * np.eye(D), lengthscale, noise_var)

    @classmethod
    def from_sigma(cls, mean, sigma, lengthscale, noise_var):
        return cls(mean, np.linalg.cholesky(np.asarray(sigma, dtype=float)), lengthscale, noise_var)

    # unconstrained layout: [mean (D), tril(L) row-major with log diagonal, log l, log sigma_n]
    def to_vector(self) -> np.ndarray:
        D = self.D
        rows, cols = np.tril_indices(D)
        tril = self.chol_factor[rows, cols].copy()
        diag = rows == cols
        tril[diag] = np.log(tril[diag])
        return np.concatenate(
            [self.mean, tril, [math.log(self.lengthscale), 0.5 * math.log(self.noise_var)]]
        )

    @classmethod
    def from_vector(cls, vec, D: int) -> "StationaryGPParams":
        vec = np.asarray(vec, dtype=float)
        n_tri = D * (D + 1) // 2
        if vec.size != D + n_tri + 2:
            raise ValueError("parameter vector has the wrong length")
        rows, cols = np.tril_indices(D)
        tril = vec[D : D + n_tri].copy()
        diag = rows == cols
        tril[diag] = np.exp(tril[diag])
        L = np.zeros((D, D))
        L[rows, cols] = tril
        return cls(vec[:D], L, math.exp(vec[-2]), math.exp(2.0 * vec[-1]))

    def with_mean(self, mean) -> "StationaryGPParams":
        return StationaryGPParams(mean, self.chol_factor, self.lengthscale, self.noise_var)

    def to_dict(self) -> dict:
        rows, cols = np.tril_indices(self.D)
        return {
            "mean": [float(x) for x in self.mean],
            "chol_lower": [float(x) for x in self.chol_factor[rows, cols]],
            "lengthscale": self.lengthscale,
            "noise_var": self.noise_var,
        }

    @classmethod
    def from_dict(cls, d) -> "StationaryGPParams":
        mean = np.array(d["mean"], dtype=float)
        D = mean.size
        L = np.zeros((D, D))
        L[np.tril_indices(D)] = d["chol_lower"]
        return cls(mean, L, d["lengthscale"], d["noise_var"])

    def allclose(self, other, atol=1e-12) -> bool:
        return (
            np.allclose(self.mean, other.mean, atol=atol, rtol=0)
            and np.allclose(self.chol_factor, other.chol_factor, atol=atol, rtol=0)
            and abs(self.lengthscale - other.lengthscale) <= atol
            and abs(self.noise_var - other.noise_var) <= atol
        )


@dataclass(frozen=True, eq=False)
class WindowedGPParams:
    """Piecewise-stationary GP indexed backward from an anchor time.

    Window ``w`` of ``W`` covers ``anchor - (W-w)*width < t <= anchor - (W-w-1)*width``;
    earlier times fall in window 0 and later ones in window ``W-1``.
    Points in different windows are independent.
    """

    windows: tuple[StationaryGPParams, ...]
    window_width_hours: float
    trained: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        windows = tuple(self.windows)
        if not windows:
            raise ValueError("need at least one window")
        if len({w.D for w in windows}) != 1:
            raise ValueError("all windows must share D")
        if not self.window_width_hours > 0:
            raise ValueError("window width must be positive")
        trained = tuple(bool(x) for x in self.trained) or (True,) * len(windows)
        if len(trained) != len(windows):
            raise ValueError("trained flags must align with windows")
        object.__setattr__(self, "windows", windows)
        object.__setattr__(self, "trained", trained)
        object.__setattr__(self, "window_width_hours", float(self.window_width_hours))

    @property
    def W(self) -> int:
        return len(self.windows)

    @property
    def D(self) -> int:
        return self.windows[0].D

    @classmethod
    def constant(cls, params: StationaryGPParams, W: int, width: float, trained=False):
        return cls((params,) * W, width, (trained,) * W)

    def window_of(self, time, anchor) -> np.ndarray:
        return window_index(np.asarray(time, dtype=float) - anchor, self.W, self.window_width_hours)

    def to_dict(self) -> dict:
        return {
            "W": self.W,
            "window_width_hours": self.window_width_hours,
            "trained": list(self.trained),
            "windows": [w.to_dict() for w in self.windows],
        }

    @classmethod
    def from_dict(cls, d) -> "WindowedGPParams":
        windows = tuple(StationaryGPParams.from_dict(w) for w in d["windows"])
        if len(windows) != d["W"]:
            raise ValueError("window count does not match W")
        return cls(windows, d["window_width_hours"], tuple(d.get("trained", ())))


def window_index(tau, W: int, width: float) -> np.ndarray:
    """Window of each anchor-relative time ``tau = t - anchor``."""
    back = np.floor(-np.asarray(tau, dtype=float) / width)
    return np.clip(W - 1 - back, 0, W - 1).astype(np.int64)


# ---------------------------------------------------------------------------
# observation blocks


@dataclass(frozen=True, eq=False)
class ObservationBlock:
    """Observations of one patient as aligned (stream, time, value) arrays."""

    stream: np.ndarray
    time: np.ndarray
    value: np.ndarray

    def __post_init__(self):
        stream = np.asarray(self.stream, dtype=np.int64).reshape(-1)
        time = np.asarray(self.time, dtype=float).reshape(-1)
        value = np.asarray(self.value, dtype=float).reshape(-1)
        if not (stream.size == time.size == value.size):
            raise ValueError("block arrays must be aligned")
        if stream.size == 0:
            raise ValueError("observation block is empty")
        if not np.all(np.isfinite(time)):
            raise ValueError("block times must be finite")
        if np.any(stream < 0):
            raise ValueError("negative stream index")
        object.__setattr__(self, "stream", stream)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "value", value)

    @property
    def n(self) -> int:
        return self.stream.size

    @property
    def index(self) -> list[tuple[int, float]]:
        return list(zip(self.stream.tolist(), self.time.tolist()))

    @classmethod
    def from_patient(cls, patient, until=None, lookback=None) -> "ObservationBlock":
        keep = np.ones(patient.n_obs, dtype=bool)
        if until is not None:
            keep &= patient.time <= until
            if lookback is not None:
                keep &= patient.time >= until - lookback
        return cls(patient.stream[keep], patient.time[keep], patient.value[keep])

    def select(self, mask) -> "ObservationBlock":
        return ObservationBlock(self.stream[mask], self.time[mask], self.value[mask])

    def shifted(self, offset: float) -> "ObservationBlock":
        return ObservationBlock(self.stream, self.time - offset, self.value)


# ---------------------------------------------------------------------------
# covariance and likelihood


def _cholesky_jittered(K):
    """Cholesky of a (stack of) SPD matrices with diagonal jitter escalation."""
    try:
        return np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        pass
    K = np.array(K, copy=True)
    stack = K.reshape((-1,) + K.shape[-2:])
    out = np.empty_like(stack)
    eye = np.eye(stack.shape[-1])
    for i, Ki in enumerate(stack):
        try:
            out[i] = np.linalg.cholesky(Ki)
            continue
        except np.linalg.LinAlgError:
            pass
        scale = float(np.mean(np.diag(Ki)))
        jitter = JITTER_START
        while True:
            try:
                out[i] = np.linalg.cholesky(Ki + jitter * scale * eye)
                break
            except np.linalg.LinAlgError:
                if jitter >= JITTER_MAX:
                    raise CovarianceError(
                        f"covariance not positive definite after jitter {JITTER_MAX:g}*mean(diag)"
                    ) from None
                jitter *= 10.0
    return out.reshape(K.shape)


def _tri_inverse(chol):
    out = np.empty_like(chol)
    for i in range(chol.shape[0]):
        inv, info = lapack.dtrtri(chol[i], lower=1)
        if info != 0:
            raise CovarianceError("singular Cholesky factor")
        out[i] = inv
    return out


def assemble_covariance(stream, time, params: StationaryGPParams, noise=True) -> np.ndarray:
    """Dense covariance ``Sigma[d_a, d_b] k(t_a, t_b) + noise_var [a == b]``.

    The matrix is returned exactly as the formula gives it; jitter is only
    applied inside the factorization, when needed.
    """
    stream = np.asarray(stream, dtype=np.int64)
    time = np.asarray(time, dtype=float)
    if stream.size == 0:
        raise ValueError("index must be non-empty")
    sigma = params.sigma
    k = se_kernel(time[:, None], time[None, :], params.lengthscale)
    K = sigma[stream[:, None], stream[None, :]] * k
    if noise:
        K[np.diag_indices_from(K)] += params.noise_var
    return K


def block_covariance(block: ObservationBlock, params: StationaryGPParams) -> np.ndarray:
    return assemble_covariance(block.stream, block.time, params)


class _Bucket:
    """Stack of blocks padded to a common size."""

    def __init__(self, blocks: Sequence[ObservationBlock], weights, positions, D):
        B = len(blocks)
        n = max(b.n for b in blocks)
        self.D = D
        self.positions = np.asarray(positions)
        self.weights = np.asarray(weights, dtype=float)
        self.n_obs = np.array([b.n for b in blocks])
        self.stream = np.zeros((B, n), dtype=np.int64)
        self.time = np.zeros((B, n))
        self.value = np.zeros((B, n))
        self.mask = np.zeros((B, n), dtype=bool)
        for i, b in enumerate(blocks):
            self.stream[i, : b.n] = b.stream
            self.time[i, : b.n] = b.time
            self.value[i, : b.n] = b.value
            self.mask[i, : b.n] = True
        pair = self.mask[:, :, None] & self.mask[:, None, :]
        self.pair = pair.astype(float)
        self.pad_diag = (~self.mask).astype(float)
        self.dt2 = (self.time[:, :, None] - self.time[:, None, :]) ** 2
        # flat index into a D x D matrix for every (a, b) pair; padded pairs point past the end
        pidx = self.stream[:, :, None] * D + self.stream[:, None, :]
        self.pair_index = np.where(pair, pidx, D * D)
        self.obs_index = np.where(self.mask, self.stream, D)
        self.diag_idx = np.arange(n)

    def factor(self, params: StationaryGPParams):
        sigma = np.append(params.sigma.ravel(), 0.0)
        k = np.exp(self.dt2 * (-0.5 / params.lengthscale**2))
        Kt = sigma[self.pair_index] * k
        K = Kt.copy()
        K[:, self.diag_idx, self.diag_idx] += params.noise_var * self.mask + self.pad_diag
        chol = _cholesky_jittered(K)
        return k, Kt, chol

    def evaluate(self, params: StationaryGPParams, grad: bool):
        """Per-block log-density and, optionally, weighted gradient pieces."""
        k, Kt, chol = self.factor(params)
        Linv = _tri_inverse(chol)
        Kinv = np.swapaxes(Linv, 1, 2) @ Linv
        mean = np.append(params.mean, 0.0)
        resid = self.value - mean[self.obs_index]
        resid[~self.mask] = 0.0
        alpha = (Kinv @ resid[:, :, None])[:, :, 0]
        logdet = 2.0 * np.log(chol[:, self.diag_idx, self.diag_idx]).sum(axis=1)
        ll = -0.5 * np.einsum("bi,bi->b", resid, alpha) - 0.5 * logdet - 0.5 * self.n_obs * LOG_2PI
        if not grad:
            return ll, None, Kinv
        D = self.D
        w = self.weights
        W = alpha[:, :, None] * alpha[:, None, :] - Kinv
        W *= self.pair
        W *= w[:, None, None]
        g_mean = np.bincount(self.obs_index.ravel(), (w[:, None] * alpha).ravel(), D + 1)[:D]
        G = 0.5 * np.bincount(self.pair_index.ravel(), (W * k).ravel(), D * D + 1)[: D * D].reshape(D, D)
        g_L = (G + G.T) @ params.chol_factor
        g_logl = 0.5 * np.einsum("bij,bij->", W, Kt * self.dt2) / params.lengthscale**2
        g_lognoise = params.noise_var * np.einsum("bii->", W)
        return ll, (g_mean, g_L, g_logl, g_lognoise), Kinv


class BlockBatch:
    """A fixed set of weighted observation blocks prepared for repeated evaluation.

    Blocks are grouped by padded size (multiples of ``pad_to``) so that each
    group is evaluated with stacked linear algebra.
    """

    def __init__(self, blocks: Sequence[ObservationBlock], weights=None, D=None, pad_to: int = 8):
        blocks = list(blocks)
        if not blocks:
            raise ValueError("need at least one block")
        if weights is None:
            weights = np.ones(len(blocks))
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(blocks),):
            raise ValueError("weights must align with blocks")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and non-negative")
        self.D = int(D if D is not None else max(int(b.stream.max()) for b in blocks) + 1)
        self.blocks = blocks
        self.weights = weights
        sizes = np.array([b.n for b in blocks])
        keys = -(-sizes // pad_to) if len(blocks) > 1 else np.zeros(1, dtype=int)
        self.buckets = []
        for key in np.unique(keys):
            pos = np.flatnonzero(keys == key)
            self.buckets.append(_Bucket([blocks[i] for i in pos], weights[pos], pos, self.D))

    def __len__(self):
        return len(self.blocks)

    def loglik(self, params: StationaryGPParams) -> np.ndarray:
        """Log-density of every block (unweighted), in input order."""
        out = np.empty(len(self.blocks))
        for bucket in self.buckets:
            ll, _, _ = bucket.evaluate(params, grad=False)
            out[bucket.positions] = ll
        return out

    def objective(self, params: StationaryGPParams, grad: bool = True):
        """Weighted log-likelihood and its gradient w.r.t. ``params.to_vector()``."""
        total = 0.0
        D = self.D
        g_mean = np.zeros(D)
        g_L = np.zeros((D, D))
        g_logl = 0.0
        g_lognoise = 0.0
        for bucket in self.buckets:
            ll, parts, _ = bucket.evaluate(params, grad)
            total += float(np.dot(bucket.weights, ll))
            if grad:
                g_mean += parts[0]
                g_L += parts[1]
                g_logl += parts[2]
                g_lognoise += parts[3]
        if not grad:
            return total, None
        rows, cols = np.tril_indices(D)
        g_tri = g_L[rows, cols]
        diag = rows == cols
        g_tri[diag] *= params.chol_factor[rows[diag], cols[diag]]
        return total, np.concatenate([g_mean, g_tri, [g_logl, g_lognoise]])

    def gls_mean(self, params: StationaryGPParams) -> np.ndarray:
        """Closed-form maximizer of the weighted objective over the mean vector.

        Streams with no weighted observation keep their current mean.
        """
        D = self.D
        A = np.zeros((D, D))
        b = np.zeros(D)
        for bucket in self.buckets:
            _, _, Kinv = bucket.evaluate(params, grad=False)
            Kinv = Kinv * bucket.pair * bucket.weights[:, None, None]
            A += np.bincount(bucket.pair_index.ravel(), Kinv.ravel(), D * D + 1)[: D * D].reshape(D, D)
            Kx = (Kinv @ np.where(bucket.mask, bucket.value, 0.0)[:, :, None])[:, :, 0]
            b += np.bincount(bucket.obs_index.ravel(), Kx.ravel(), D + 1)[:D]
        observed = np.diag(A) > 0
        mean = params.mean.copy()
        if observed.any():
            sub = np.ix_(observed, observed)
            rhs = b[observed] - A[np.ix_(observed, ~observed)] @ mean[~observed]
            mean[observed] = np.linalg.solve(A[sub], rhs)
        return mean


def log_marginal_likelihood(block: ObservationBlock, params: StationaryGPParams, grad: bool = True):
    """Log-density of one block under a stationary multi-task GP.

    Returns
    -------
    value : float
    gradient : ndarray or None
        Derivative with respect to ``params.to_vector()``.
    """
    if block.stream.max() >= params.D:
        raise ValueError("block references a stream beyond params.D")
    batch = BlockBatch([block], D=params.D)
    value, g = batch.objective(params, grad=grad)
    return value, g


def windowed_log_likelihood(block: ObservationBlock, params: WindowedGPParams, anchor: float) -> float:
    """Log-density under the windowed model; windows are independent."""
    win = params.window_of(block.time, anchor)
    total = 0.0
    for w in np.unique(win):
        sub = block.select(win == w).shifted(anchor)
        total += log_marginal_likelihood(sub, params.windows[w], grad=False)[0]
    return total


def windowed_loglik_batch(blocks, anchors, params: WindowedGPParams) -> np.ndarray:
    """Windowed log-density for many blocks at once."""
    out = np.zeros(len(blocks))
    per_window = [([], []) for _ in range(params.W)]
    for i, (block, anchor) in enumerate(zip(blocks, anchors)):
        win = params.window_of(block.time, anchor)
        for w in np.unique(win):
            per_window[w][0].append(block.select(win == w).shifted(anchor))
            per_window[w][1].append(i)
    for w, (subs, owners) in enumerate(per_window):
        if subs:
            ll = BlockBatch(subs, D=params.D).loglik(params.windows[w])
            np.add.at(out, owners, ll)
    return out


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class OptimizerConfig:
    """Settings of the weighted maximum-likelihood fit.

    Each outer step sets the mean in closed form, then runs L-BFGS-B on the
    kernel parameters until the projected gradient infinity-norm drops below
    ``grad_tol`` or ``max_iter`` iterations elapse.
    """

    max_iter: int = 200
    grad_tol: float = 1e-5
    max_outer: int = 10
    outer_tol: float = 1e-9


def initial_params(blocks: Sequence[ObservationBlock], weights, D: int) -> StationaryGPParams:
    """Deterministic data-driven starting point for :func:`fit_weighted_mle`."""
    weights = np.asarray(weights, dtype=float)
    mean = np.zeros(D)
    per_patient = np.full((len(blocks), D), np.nan)
    wsum = np.zeros(D)
    for i, (b, w) in enumerate(zip(blocks, weights)):
        counts = np.bincount(b.stream, minlength=D)
        sums = np.bincount(b.stream, weights=b.value, minlength=D)
        seen = counts > 0
        per_patient[i, seen] = sums[seen] / counts[seen]
        mean += w * sums
        wsum += w * counts
    observed = wsum > 0
    mean[observed] /= wsum[observed]

    cov = np.zeros((D, D))
    for d in range(D):
        for e in range(d + 1):
            both = ~np.isnan(per_patient[:, d]) & ~np.isnan(per_patient[:, e])
            wb = weights[both]
            if wb.sum() > 0:
                cd = per_patient[both, d] - mean[d]
                ce = per_patient[both, e] - mean[e]
                cov[d, e] = cov[e, d] = np.dot(wb, cd * ce) / wb.sum()
    cov += 0.1 * np.eye(D)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        L = np.diag(np.sqrt(np.diag(cov)))

    gaps = [
        np.abs(b.time[:, None] - b.time[None, :])[np.triu_indices(b.n, 1)]
        for b, w in zip(blocks, weights)
        if b.n > 1 and w > 0
    ]
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    gaps = gaps[gaps > 0]
    lengthscale = float(np.median(gaps)) if gaps.size else 1.0
    return StationaryGPParams(mean, L, lengthscale, 0.1)


def _clip_to_bounds(params: StationaryGPParams) -> StationaryGPParams:
    lo, hi = LOG_LENGTHSCALE_BOUNDS
    ell = math.exp(min(max(math.log(params.lengthscale), lo), hi))
    lo, hi = LOG_NOISE_STD_BOUNDS
    noise = math.exp(2 * min(max(0.5 * math.log(params.noise_var), lo), hi))
    if ell == params.lengthscale and noise == params.noise_var:
        return params
    return StationaryGPParams(params.mean, params.chol_factor, ell, noise)


def fit_weighted_mle(
    blocks: Sequence[ObservationBlock],
    weights=None,
    init: StationaryGPParams | None = None,
    opt_cfg: OptimizerConfig | None = None,
    D: int | None = None,
) -> StationaryGPParams:
    """Maximize ``sum_i w_i log f(block_i | theta)`` by generalized EM-style ascent.

    Weights are rescaled to sum to one, so multiplying them by a constant
    does not change the result. Blocks with zero weight are dropped before
    anything else. The returned parameters never score below ``init``.
    """
    opt_cfg = opt_cfg or OptimizerConfig()
    blocks = list(blocks)
    weights = np.ones(len(blocks)) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != (len(blocks),):
        raise ValueError("weights must align with blocks")
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    keep = np.flatnonzero(weights > 0)
    if keep.size == 0:
        raise ValueError("at least one weight must be positive")
    blocks = [blocks[i] for i in keep]
    weights = weights[keep] / weights[keep].sum()
    if D is None:
        D = init.D if init is not None else max(int(b.stream.max()) for b in blocks) + 1
    if init is None:
        init = initial_params(blocks, weights, D)
    init = _clip_to_bounds(init)
    batch = BlockBatch(blocks, weights, D=D)

    current = init
    try:
        f_cur = batch.objective(current, grad=False)[0]
    except np.linalg.LinAlgError as exc:
        raise FitDivergenceError(f"initial parameters not evaluable: {exc}", init) from None
    if not math.isfinite(f_cur):
        raise FitDivergenceError("non-finite objective at initial parameters", init)

    n_mean = D
    bounds = [(None, None)] * (current.to_vector().size - n_mean - 2)
    bounds += [LOG_LENGTHSCALE_BOUNDS, LOG_NOISE_STD_BOUNDS]

    for _ in range(opt_cfg.max_outer):
        f_start = f_cur
        # closed-form mean given the kernel
        try:
            candidate = current.with_mean(batch.gls_mean(current))
            f_new = batch.objective(candidate, grad=False)[0]
            if math.isfinite(f_new) and f_new >= f_cur:
                current, f_cur = candidate, f_new
        except np.linalg.LinAlgError:
            pass

        mean = current.mean

        def negobj(z):
            try:
                p = StationaryGPParams.from_vector(np.concatenate([mean, z]), D)
                f, g = batch.objective(p, grad=True)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                return np.inf, np.zeros_like(z)
            if not math.isfinite(f) or not np.all(np.isfinite(g)):
                return np.inf, np.zeros_like(z)
            return -f, -g[n_mean:]

        z0 = current.to_vector()[n_mean:]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res = optimize.minimize(
                negobj,
                z0,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": opt_cfg.max_iter, "gtol": opt_cfg.grad_tol, "ftol": 1e-12},
            )
        if math.isfinite(res.fun) and -res.fun > f_cur:
            current = StationaryGPParams.from_vector(np.concatenate([mean, res.x]), D)
            f_cur = -float(res.fun)
        if f_cur - f_start <= opt_cfg.outer_tol * max(1.0, abs(f_cur)):
            break
    if not math.isfinite(f_cur):
        raise FitDivergenceError("objective became non-finite", init)
    return current


def fit_windowed_mle(
    blocks: Sequence[ObservationBlock],
    anchors,
    weights=None,
    W: int = 4,
    width: float = 12.0,
    opt_cfg: OptimizerConfig | None = None,
    fallback: StationaryGPParams | None = None,
    D: int | None = None,
) -> WindowedGPParams:
    """Per-window weighted MLE of a windowed GP anchored at ``anchors``.

    Windows without any weighted observation take ``fallback`` (or, when no
    fallback is given, the nearest trained window) and are flagged untrained.
    """
    blocks = list(blocks)
    anchors = np.asarray(anchors, dtype=float)
    weights = np.ones(len(blocks)) if weights is None else np.asarray(weights, dtype=float)
    if not (len(blocks) == anchors.size == weights.size):
        raise ValueError("blocks, anchors and weights must align")
    if D is None:
        D = fallback.D if fallback is not None else max(int(b.stream.max()) for b in blocks) + 1
    subs = [([], []) for _ in range(W)]
    for block, anchor, w in zip(blocks, anchors, weights):
        if w <= 0:
            continue
        win = window_index(block.time - anchor, W, width)
        for j in np.unique(win):
            subs[j][0].append(block.select(win == j).shifted(anchor))
            subs[j][1].append(w)
    fitted = [
        fit_weighted_mle(sb, sw, opt_cfg=opt_cfg, D=D) if sb else None for sb, sw in subs
    ]
    trained = [p is not None for p in fitted]
    if not any(trained):
        raise ValueError("all windows are empty")
    for j in range(W):
        if fitted[j] is None:
            if fallback is not None:
                fitted[j] = fallback
            else:
                nearest = min((abs(j - i), i) for i in range(W) if trained[i])[1]
                fitted[j] = fitted[nearest]
    return WindowedGPParams(tuple(fitted), width, tuple(trained))
