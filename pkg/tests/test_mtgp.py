import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal, norm

from gpexperts.mtgp import (
    BlockBatch,
    ObservationBlock,
    StationaryGPParams,
    WindowedGPParams,
    assemble_covariance,
    fit_weighted_mle,
    fit_windowed_mle,
    log_marginal_likelihood,
    se_kernel,
    window_index,
    windowed_log_likelihood,
    windowed_loglik_batch,
)


def random_params(rng, D):
    L = np.tril(rng.normal(size=(D, D)) * 0.5)
    L[np.diag_indices(D)] = np.exp(rng.normal(scale=0.3, size=D))
    return StationaryGPParams(rng.normal(size=D), L, float(np.exp(rng.uniform(0, 2.5))), float(np.exp(rng.uniform(-3, 0))))


def random_block(rng, D, n):
    return ObservationBlock(rng.integers(0, D, n), rng.uniform(0, 30, n), rng.normal(size=n))


def oracle_covariance(stream, time, params):
    # element-wise double loop over the separable formula
    n = len(stream)
    S = params.sigma
    K = np.empty((n, n))
    for a in range(n):
        for b in range(n):
            K[a, b] = S[stream[a], stream[b]] * math.exp(-((time[a] - time[b]) ** 2) / (2 * params.lengthscale**2))
            if a == b:
                K[a, b] += params.noise_var
    return K


def oracle_loglik(block, params):
    K = oracle_covariance(block.stream, block.time, params)
    return multivariate_normal(params.mean[block.stream], K).logpdf(block.value)


# --- kernel --------------------------------------------------------------


def test_se_kernel_examples():
    # [TRIVIAL]
    assert se_kernel(3.0, 3.0, 7.0) == 1.0
    assert se_kernel(0.0, 2.5, 2.5) == pytest.approx(math.exp(-0.5), rel=1e-15)
    assert se_kernel(0.0, 30.0, 3.0) < 2e-22
    with pytest.raises(ValueError):
        se_kernel(0.0, 1.0, 0.0)


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-2, 1e3))
def test_se_kernel_symmetric(t, tp, ell):
    assert se_kernel(t, tp, ell) == se_kernel(tp, t, ell)


# --- covariance ----------------------------------------------------------


def test_covariance_scalar_case():
    p = StationaryGPParams([0.0, 1.0], [[1.5, 0.0], [0.3, 0.7]], 2.0, 0.2)
    K = assemble_covariance([1], [4.0], p)
    assert K.shape == (1, 1) and K[0, 0] == pytest.approx(0.3**2 + 0.7**2 + 0.2, rel=1e-15)


def test_covariance_identity_lag_lengthscale():
    p = StationaryGPParams(np.zeros(2), np.eye(2), 3.0, 0.25)
    K = assemble_covariance([1, 1], [0.0, 3.0], p)
    assert K[0, 1] == pytest.approx(math.exp(-0.5), rel=1e-15)
    np.testing.assert_allclose(np.diag(K), 1.25)


def test_covariance_matches_double_loop_oracle():
    # [DERIVED] random 6-point index, D=3
    rng = np.random.default_rng(1)
    p = random_params(rng, 3)
    s, t = rng.integers(0, 3, 6), rng.uniform(0, 10, 6)
    K = assemble_covariance(s, t, p)
    np.testing.assert_allclose(K, oracle_covariance(s, t, p), rtol=0, atol=1e-14)
    np.testing.assert_array_equal(K, K.T)
    np.linalg.cholesky(K)


# --- likelihood ----------------------------------------------------------


def test_single_observation_is_univariate_normal():
    p = StationaryGPParams([1.0, -2.0], [[1.0, 0.0], [0.5, 2.0]], 4.0, 0.3)
    v, _ = log_marginal_likelihood(ObservationBlock([1], [2.0], [0.7]), p)
    assert v == pytest.approx(norm(-2.0, math.sqrt(0.25 + 4.0 + 0.3)).logpdf(0.7), rel=1e-13)


def test_independent_streams_simultaneous():
    p = StationaryGPParams([0.5, -1.0], np.diag([1.2, 0.8]), 4.0, 0.1)
    v, _ = log_marginal_likelihood(ObservationBlock([0, 1], [3.0, 3.0], [0.1, 0.2]), p)
    expect = norm(0.5, math.sqrt(1.44 + 0.1)).logpdf(0.1) + norm(-1.0, math.sqrt(0.64 + 0.1)).logpdf(0.2)
    assert v == pytest.approx(expect, rel=1e-13)


@pytest.mark.parametrize("D", [1, 2, 3, 5])
def test_loglik_matches_dense_oracle(D):
    rng = np.random.default_rng(D)
    for _ in range(5):
        p = random_params(rng, D)
        b = random_block(rng, D, int(rng.integers(1, 15)))
        assert log_marginal_likelihood(b, p, grad=False)[0] == pytest.approx(oracle_loglik(b, p), rel=1e-10, abs=1e-10)


def test_batch_matches_per_block_with_padding():
    rng = np.random.default_rng(7)
    p = random_params(rng, 3)
    blocks = [random_block(rng, 3, n) for n in (1, 3, 7, 8, 9, 17, 4)]
    w = rng.uniform(0, 2, len(blocks))
    batch = BlockBatch(blocks, w, D=3)
    per = np.array([oracle_loglik(b, p) for b in blocks])
    np.testing.assert_allclose(batch.loglik(p), per, rtol=1e-11)
    assert batch.objective(p, grad=False)[0] == pytest.approx(np.dot(w, per), rel=1e-11)


def finite_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("D", [1, 2, 3])
def test_gradient_matches_finite_differences(D):
    # [DERIVED] central differences, h = 1e-5
    rng = np.random.default_rng(10 + D)
    for _ in range(3):
        p = random_params(rng, D)
        b = random_block(rng, D, 8)
        _, g = log_marginal_likelihood(b, p)
        fd = finite_difference(lambda x: log_marginal_likelihood(b, StationaryGPParams.from_vector(x, D), grad=False)[0], p.to_vector())
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-6)


@given(st.integers(0, 10_000))
def test_loglik_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = random_params(rng, 2)
    b = random_block(rng, 2, 6)
    perm = rng.permutation(6)
    b2 = ObservationBlock(b.stream[perm], b.time[perm], b.value[perm])
    assert log_marginal_likelihood(b2, p, grad=False)[0] == pytest.approx(log_marginal_likelihood(b, p, grad=False)[0], rel=1e-11)


def test_scalar_sigma_single_stream_equals_single_task_gp():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 20, 9))
    x = rng.normal(size=9)
    p = StationaryGPParams(np.full(3, 0.4), math.sqrt(2.0) * np.eye(3), 3.5, 0.2)
    K = 2.0 * np.exp(-((t[:, None] - t[None, :]) ** 2) / (2 * 3.5**2)) + 0.2 * np.eye(9)
    expect = multivariate_normal(np.full(9, 0.4), K).logpdf(x)
    got = log_marginal_likelihood(ObservationBlock(np.full(9, 2), t, x), p, grad=False)[0]
    assert got == pytest.approx(expect, rel=1e-12)


def test_jitter_rescues_duplicate_points():
    # identical (stream, time) pairs with tiny noise make K numerically singular
    p = StationaryGPParams([0.0], [[1.0]], 5.0, 1e-17)
    b = ObservationBlock([0, 0, 0], [1.0, 1.0, 1.0], [0.2, 0.2, 0.2])
    v, _ = log_marginal_likelihood(b, p)
    assert math.isfinite(v)


# --- vector layout -------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_vector_round_trip(seed, D):
    p = random_params(np.random.default_rng(seed), D)
    q = StationaryGPParams.from_vector(p.to_vector(), D)
    assert q.allclose(p, atol=1e-12)
    assert p.to_vector().size == p.n_free == D * (D + 1) // 2 + D + 2


def test_params_dict_round_trip_exact():
    p = random_params(np.random.default_rng(0), 4)
    q = StationaryGPParams.from_dict(p.to_dict())
    assert q.allclose(p, atol=0.0)


# --- windows -------------------------------------------------------------


def test_window_index_convention():
    # W=4, width 12: (-12, 0] -> 3, (-24, -12] -> 2, ..., earlier -> 0, later -> 3
    tau = np.array([0.0, -0.5, -12.0, -12.01, -24.0, -36.0, -36.5, -100.0, 5.0])
    np.testing.assert_array_equal(window_index(tau, 4, 12.0), [3, 3, 2, 2, 1, 0, 0, 0, 3])


def test_single_window_equals_shifted_stationary():
    rng = np.random.default_rng(4)
    p = random_params(rng, 2)
    b = random_block(rng, 2, 7)
    wp = WindowedGPParams((p,), 12.0)
    expect = log_marginal_likelihood(b.shifted(30.0), p, grad=False)[0]
    assert windowed_log_likelihood(b, wp, 30.0) == expect


def test_two_window_dense_oracle():
    # [DERIVED] explicit block-diagonal matrix with window-local means
    rng = np.random.default_rng(5)
    p0, p1 = random_params(rng, 2), random_params(rng, 2)
    wp = WindowedGPParams((p0, p1), 10.0)
    b = ObservationBlock([0, 1, 0, 1, 1], [1.0, 4.0, 12.0, 15.0, 19.5], rng.normal(size=5))
    anchor = 20.0
    win = wp.window_of(b.time, anchor)
    assert win.tolist() == [0, 0, 1, 1, 1]
    tau = b.time - anchor
    K = np.zeros((5, 5))
    mu = np.zeros(5)
    for a in range(5):
        pa = wp.windows[win[a]]
        mu[a] = pa.mean[b.stream[a]]
        for c in range(5):
            if win[a] == win[c]:
                K[a, c] = oracle_covariance(b.stream[[a, c]], tau[[a, c]], pa)[0, 1] + (pa.noise_var if a == c else 0.0)
    expect = multivariate_normal(mu, K).logpdf(b.value)
    assert windowed_log_likelihood(b, wp, anchor) == pytest.approx(expect, rel=1e-12)
    np.testing.assert_allclose(windowed_loglik_batch([b], [anchor], wp), [expect], rtol=1e-12)


def test_constant_windows_preserve_stable_likelihood():
    rng = np.random.default_rng(6)
    p = random_params(rng, 3)
    b = random_block(rng, 3, 5)
    b = ObservationBlock(b.stream, np.array([38.0, 39.0, 40.0, 41.0, 42.0]), b.value)  # one window
    wp = WindowedGPParams.constant(p, 4, 12.0)
    assert windowed_log_likelihood(b, wp, 45.0) == pytest.approx(log_marginal_likelihood(b, p, grad=False)[0], rel=1e-13)


# --- fitting -------------------------------------------------------------


def draw_blocks(rng, params, n_patients, n_points, span=30.0):
    out = []
    for _ in range(n_patients):
        s = rng.integers(0, params.D, n_points)
        t = np.sort(rng.uniform(0, span, n_points))
        K = assemble_covariance(s, t, params)
        out.append(ObservationBlock(s, t, rng.multivariate_normal(params.mean[s], K)))
    return out


def test_fit_recovers_generating_params():
    # [DERIVED] 200 patients x 12 points from a known D=2 GP
    rng = np.random.default_rng(11)
    truth = StationaryGPParams([0.5, -0.3], [[1.0, 0.0], [0.4, 0.8]], 5.0, 0.1)
    blocks = draw_blocks(rng, truth, 200, 12)
    fit = fit_weighted_mle(blocks)
    assert abs(fit.lengthscale - 5.0) / 5.0 < 0.3
    np.testing.assert_allclose(fit.mean, truth.mean, atol=0.1)


def test_fit_constant_block_mean():
    b = ObservationBlock([0, 0, 1, 1], [0.0, 1.0, 0.0, 1.0], [2.5, 2.5, -1.0, -1.0])
    init = StationaryGPParams(np.zeros(2), np.eye(2), 200.0, 0.1)
    fit = fit_weighted_mle([b], [1.0], init=init)
    np.testing.assert_allclose(fit.mean, [2.5, -1.0], atol=1e-3)


def test_fit_weight_scale_invariance_and_monotone():
    rng = np.random.default_rng(12)
    truth = StationaryGPParams([0.0, 1.0], [[1.0, 0.0], [0.5, 0.6]], 4.0, 0.2)
    blocks = draw_blocks(rng, truth, 30, 8)
    w = rng.uniform(0.1, 1.0, 30)
    a = fit_weighted_mle(blocks, w)
    b = fit_weighted_mle(blocks, 2 * w)
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), atol=1e-8)
    init = StationaryGPParams.isotropic(2)
    batch = BlockBatch(blocks, w, D=2)
    assert batch.objective(fit_weighted_mle(blocks, w, init=init), grad=False)[0] >= batch.objective(init, grad=False)[0]


def test_zero_weight_blocks_have_no_influence():
    rng = np.random.default_rng(13)
    truth = StationaryGPParams([0.0], [[1.0]], 4.0, 0.2)
    blocks = draw_blocks(rng, truth, 12, 6)
    w = np.r_[np.ones(8), np.zeros(4)]
    a = fit_weighted_mle(blocks, w)
    b = fit_weighted_mle(blocks[:8], np.ones(8))
    np.testing.assert_allclose(a.to_vector(), b.to_vector(), atol=1e-10)


def test_gls_mean_zero_gradient():
    rng = np.random.default_rng(14)
    p = random_params(rng, 3)
    blocks = [random_block(rng, 3, 6) for _ in range(5)]
    batch = BlockBatch(blocks, rng.uniform(0.5, 1, 5), D=3)
    q = p.with_mean(batch.gls_mean(p))
    _, g = batch.objective(q)
    np.testing.assert_allclose(g[:3], 0.0, atol=1e-9)


def test_windowed_fit_recovers_window_means():
    # [DERIVED] two windows with means 0 and 2
    rng = np.random.default_rng(15)
    w0 = StationaryGPParams(np.zeros(2), 0.7 * np.eye(2), 4.0, 0.1)
    w1 = w0.with_mean(np.full(2, 2.0))
    blocks, anchors = [], []
    for _ in range(150):
        anchor = 24.0
        s = rng.integers(0, 2, 12)
        t = np.sort(rng.uniform(0, 24, 12))
        win = window_index(t - anchor, 2, 12.0)
        v = np.empty(12)
        for j, p in enumerate((w0, w1)):
            m = win == j
            if m.any():
                v[m] = rng.multivariate_normal(p.mean[s[m]], assemble_covariance(s[m], t[m] - anchor, p))
        blocks.append(ObservationBlock(s, t, v))
        anchors.append(anchor)
    fit = fit_windowed_mle(blocks, anchors, W=2, width=12.0)
    np.testing.assert_allclose(fit.windows[0].mean, 0.0, atol=0.15)
    np.testing.assert_allclose(fit.windows[1].mean, 2.0, atol=0.15)
    assert fit.trained == (True, True)


def test_windowed_fit_single_window_reduction():
    rng = np.random.default_rng(16)
    truth = StationaryGPParams([0.3], [[1.0]], 4.0, 0.2)
    blocks = draw_blocks(rng, truth, 20, 6, span=10.0)
    anchors = np.full(20, 10.0)
    fit = fit_windowed_mle(blocks, anchors, W=1, width=48.0)
    ref = fit_weighted_mle([b.shifted(10.0) for b in blocks])
    np.testing.assert_allclose(fit.windows[0].to_vector(), ref.to_vector(), atol=1e-12)


def test_windowed_fit_empty_windows_use_fallback():
    rng = np.random.default_rng(17)
    truth = StationaryGPParams([0.3], [[1.0]], 4.0, 0.2)
    blocks = draw_blocks(rng, truth, 10, 5, span=10.0)
    fb = StationaryGPParams.isotropic(1)
    fit = fit_windowed_mle(blocks, np.full(10, 10.0), W=3, width=12.0, fallback=fb)
    assert fit.trained == (False, False, True)
    assert fit.windows[0] is fb
    with pytest.raises(ValueError, match="empty"):
        fit_windowed_mle(blocks, np.full(10, 10.0), weights=np.zeros(10), W=2)
