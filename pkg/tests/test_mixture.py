import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal
from sklearn.metrics import adjusted_rand_score

from gpexperts.cohort import apply_normalization, fit_normalization
from gpexperts.mixture import (
    StableMixture,
    bayes_factor,
    discover_experts,
    e_step,
    expected_complete_loglik,
    expert_loglik,
    log_bayes_factor,
    m_step,
    model_complexity,
    observed_loglik,
    responsibilities_from_loglik,
    run_em,
)
from gpexperts.mtgp import ObservationBlock, StationaryGPParams, assemble_covariance
from gpexperts.synth import generate_cohort, separated_preset


def separated_blocks(M, N, seed, separation=3.0):
    coh, latent = generate_cohort(separated_preset(M, separation=separation), N, seed=seed)
    coh = apply_normalization(coh, fit_normalization(coh))
    return [ObservationBlock.from_patient(p) for p in coh.patients], latent[:, 0]


@pytest.fixture(scope="module")
def two_class():
    return separated_blocks(2, 120, seed=3)


# --- complexity and Bayes factors --------------------------------------------


def test_model_complexity_examples():
    # [PAPER] four experts over five vitals; [TRIVIAL] 4 * (15 + 5 + 2)
    assert model_complexity(4, 5) == 88
    assert model_complexity(1, 1) == 4
    assert model_complexity(2, 5) == 44
    with pytest.raises(ValueError):
        model_complexity(0, 3)


def test_log_bayes_factor_example():
    # [DERIVED] 10 - 0.5 * 22 * ln 1000
    lb = log_bayes_factor(-100.0, -110.0, 88, 66, 1000)
    assert lb == pytest.approx(10 - 11 * math.log(1000), abs=1e-10)
    assert lb == pytest.approx(-65.99, abs=5e-3)


@given(st.floats(-1e4, 1e4), st.integers(1, 50), st.integers(1, 10**6))
def test_bayes_factor_identities(q, psi, n):
    # equal fits and complexities give B = 1; the log form inverts
    assert bayes_factor(q, q, psi, psi, n) == 1.0
    lb = log_bayes_factor(q, q - 3.0, psi + 4, psi, n)
    assert lb == pytest.approx(3.0 - 2.0 * math.log(n), abs=1e-9)
    assert log_bayes_factor(q - 3.0, q, psi, psi + 4, n) == pytest.approx(-lb, abs=1e-9)


def test_complexity_penalty_only_lowers_factor():
    assert bayes_factor(-50.0, -50.0, 44, 22, 300) < 1.0


def test_bayes_factor_overflow_is_inf():
    assert bayes_factor(1e6, 0.0, 1, 1, 10) == math.inf


# --- E-step --------------------------------------------------------------


def test_e_step_matches_dense_oracle():
    # [DERIVED] Bayes rule with scipy densities
    rng = np.random.default_rng(0)
    experts = (
        StationaryGPParams([0.0, 0.0], np.eye(2), 4.0, 0.2),
        StationaryGPParams([1.5, -1.0], [[0.8, 0.0], [0.3, 1.1]], 7.0, 0.1),
    )
    mix = StableMixture(experts, np.array([0.3, 0.7]))
    blocks = [ObservationBlock(rng.integers(0, 2, 5), rng.uniform(0, 20, 5), rng.normal(size=5)) for _ in range(6)]
    resp = e_step(blocks, mix)
    for i, b in enumerate(blocks):
        dens = np.array([
            multivariate_normal(e.mean[b.stream], assemble_covariance(b.stream, b.time, e)).pdf(b.value) for e in experts
        ])
        joint = dens * mix.weights
        np.testing.assert_allclose(resp[i], joint / joint.sum(), rtol=1e-9)


@given(st.integers(0, 10_000), st.integers(1, 5))
def test_responsibilities_on_simplex(seed, M):
    rng = np.random.default_rng(seed)
    ll = rng.normal(scale=300.0, size=(7, M))  # wide spread exercises the log domain
    w = rng.dirichlet(np.ones(M))
    r = responsibilities_from_loglik(ll, w)
    assert np.all(r >= 0) and np.all(r <= 1)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_responsibilities_invariant_to_weight_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    ll = rng.normal(scale=10.0, size=(5, 3))
    w = rng.dirichlet(np.ones(3))
    np.testing.assert_allclose(responsibilities_from_loglik(ll, c * w), responsibilities_from_loglik(ll, w), rtol=1e-12, atol=1e-300)


def test_e_step_permutation_symmetry():
    rng = np.random.default_rng(8)
    experts = tuple(StationaryGPParams.isotropic(2, mean=float(m)) for m in range(3))
    mix = StableMixture(experts, np.array([0.2, 0.3, 0.5]))
    blocks = [ObservationBlock(rng.integers(0, 2, 4), rng.uniform(0, 10, 4), rng.normal(1, 1, 4)) for _ in range(5)]
    order = [2, 0, 1]
    np.testing.assert_allclose(e_step(blocks, mix.permuted(order)), e_step(blocks, mix)[:, order], rtol=1e-14)


def test_zero_weight_expert_gets_zero_responsibility():
    ll = np.array([[-1.0, -2.0], [-3.0, -0.5]])
    r = responsibilities_from_loglik(ll, [1.0, 0.0])
    np.testing.assert_array_equal(r[:, 1], 0.0)
    assert math.isfinite(expected_complete_loglik(ll, [1.0, 0.0], r))


def test_q_and_loglik_hand_computed():
    ll = np.array([[-1.0, -2.0], [-3.0, -0.5]])
    w = np.array([0.25, 0.75])
    r = np.array([[0.6, 0.4], [0.1, 0.9]])
    q = 0.6 * (math.log(0.25) - 1) + 0.4 * (math.log(0.75) - 2) + 0.1 * (math.log(0.25) - 3) + 0.9 * (math.log(0.75) - 0.5)
    assert expected_complete_loglik(ll, w, r) == pytest.approx(q, rel=1e-14)
    lo = math.log(0.25 * math.exp(-1) + 0.75 * math.exp(-2)) + math.log(0.25 * math.exp(-3) + 0.75 * math.exp(-0.5))
    assert observed_loglik(ll, w) == pytest.approx(lo, rel=1e-14)


# --- M-step and EM -------------------------------------------------------


def test_m_step_weights_are_mean_responsibility(two_class):
    blocks, _ = two_class
    rng = np.random.default_rng(1)
    resp = rng.dirichlet(np.ones(2), size=len(blocks))
    mix, starved = m_step(blocks, resp, None, D=2)
    np.testing.assert_allclose(mix.weights, resp.mean(axis=0), rtol=1e-12)
    assert starved == ()


def test_m_step_starved_expert_keeps_previous():
    rng = np.random.default_rng(2)
    blocks = [ObservationBlock([0, 0], [0.0, 1.0], rng.normal(size=2)) for _ in range(5)]
    prev = StableMixture((StationaryGPParams.isotropic(1), StationaryGPParams.isotropic(1, mean=3.0)), np.array([0.5, 0.5]))
    resp = np.c_[np.ones(5), np.zeros(5)]
    mix, starved = m_step(blocks, resp, prev, D=1)
    assert starved == (1,)
    assert mix.experts[1] is prev.experts[1]
    assert mix.weights[1] == 0.0


def test_em_monotone_and_converges(two_class):
    blocks, _ = two_class
    trace = io.StringIO()
    mix, resp, rep = run_em(blocks, 2, seed=0, trace=trace)
    assert rep.converged and rep.iterations == len(rep.q_history)
    # each M-step does not decrease Q under the responsibilities it was given
    assert all(a >= b - 1e-9 for a, b in zip(rep.q_history, rep.q_before_history))
    assert np.all(np.diff(rep.loglik_history) >= -1e-6)
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-12)
    assert len(trace.getvalue().splitlines()) == rep.iterations
    assert rep.delta_history[-1] < 1e-3


def test_em_recovers_two_classes(two_class):
    blocks, z = two_class
    _, resp, _ = run_em(blocks, 2, seed=0)
    assert adjusted_rand_score(z, resp.argmax(axis=1)) >= 0.9


def test_em_is_deterministic(two_class):
    blocks, _ = two_class
    a = run_em(blocks[:40], 2, seed=5)
    b = run_em(blocks[:40], 2, seed=5)
    np.testing.assert_array_equal(a[1], b[1])
    assert a[2].q_star == b[2].q_star


def test_em_single_expert_is_weighted_mle(two_class):
    from gpexperts.mtgp import fit_weighted_mle

    blocks, _ = two_class
    mix, resp, rep = run_em(blocks[:30], 1, seed=0)
    assert rep.converged and rep.iterations == 1
    np.testing.assert_array_equal(resp, 1.0)
    ref = fit_weighted_mle(blocks[:30], D=2)
    assert mix.experts[0].allclose(ref, atol=1e-6)


def test_em_rejects_bad_arguments(two_class):
    blocks, _ = two_class
    with pytest.raises(ValueError):
        run_em(blocks, 0)
    with pytest.raises(ValueError):
        run_em(blocks, 2, eps=0.0)


def test_mixture_validation_and_round_trip():
    e = StationaryGPParams.isotropic(2)
    with pytest.raises(ValueError):
        StableMixture((e, e), np.array([0.5, 0.6]))
    mix = StableMixture((e, e.with_mean(np.ones(2))), np.array([0.25, 0.75]))
    back = StableMixture.from_dict(mix.to_dict())
    np.testing.assert_array_equal(back.weights, mix.weights)
    assert back.experts[1].allclose(mix.experts[1], atol=0)
    assert mix.permuted([1, 0]).weights.tolist() == [0.75, 0.25]


def test_expert_loglik_shape(two_class):
    blocks, _ = two_class
    ll = expert_loglik(blocks[:4], [StationaryGPParams.isotropic(2)] * 3)
    assert ll.shape == (4, 3) and np.all(np.isfinite(ll))


# --- discovery -----------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("M_true", [1, 2])
def test_discover_selects_true_M(M_true):
    blocks, z = separated_blocks(M_true, 200, seed=11)
    found = discover_experts(blocks, seed=0, m_max=4)
    assert found.selected_M == M_true
    assert set(found.reports) == set(range(1, M_true + 2))
    assert found.log_bayes_factors[M_true + 1] < math.log(3.0)
    if M_true > 1:
        assert found.log_bayes_factors[M_true] >= math.log(3.0)


def test_discover_respects_m_max(two_class):
    blocks, _ = two_class
    found = discover_experts(blocks[:60], seed=0, m_max=1)
    assert found.selected_M == 1 and found.log_bayes_factors == {}


def test_discover_validates_arguments(two_class):
    blocks, _ = two_class
    with pytest.raises(ValueError):
        discover_experts(blocks, b_bar=0.0)
    with pytest.raises(ValueError):
        discover_experts(blocks, criterion="aic")
