import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from gpexperts.cohort import CohortError, NormalizationStats
from gpexperts.mtgp import (
    ObservationBlock,
    StationaryGPParams,
    WindowedGPParams,
    assemble_covariance,
    window_index,
)
from gpexperts.scoring import (
    ModelBundle,
    aggregate_risk,
    check_compatible,
    endpoint_score,
    expert_risk,
    score_stream,
    score_times,
    whatif,
    write_trace,
)

from conftest import make_patient, make_schema, two_expert_bundle


def rising_patient(schema, gender="female"):
    # follows the mean path of the "up" expert anchored at the last observation
    t = np.arange(0.0, 36.0, 2.0)
    v = 0.5 * (window_index(t - 34.0, 4, 12.0) + 1.0)
    stream = np.tile([0, 1], t.size)
    time = np.repeat(t, 2)
    value = np.repeat(v, 2)
    return make_patient("r1", schema, stream, time, value, stay=36.0,
                        admission={"age": 60.0, "gender": gender, "unit": "medicine"})


# --- expert risk ---------------------------------------------------------


def test_expert_risk_matches_bayes_rule():
    # [DERIVED] explicit densities from scipy
    rng = np.random.default_rng(0)
    stable = StationaryGPParams([0.0, 0.0], np.eye(2), 5.0, 0.2)
    det = WindowedGPParams((stable.with_mean(np.ones(2)), stable.with_mean(np.full(2, 2.0))), 6.0)
    b = ObservationBlock([0, 1, 0, 1], [1.0, 4.0, 8.0, 11.0], rng.normal(1, 1, 4))
    anchor = 11.0
    f0 = multivariate_normal(stable.mean[b.stream], assemble_covariance(b.stream, b.time, stable)).pdf(b.value)
    win = det.window_of(b.time, anchor)
    f1 = 1.0
    for w in (0, 1):
        m = win == w
        p = det.windows[w]
        f1 *= multivariate_normal(p.mean[b.stream[m]], assemble_covariance(b.stream[m], b.time[m] - anchor, p)).pdf(b.value[m])
    prior = 0.2
    expect = prior * f1 / (prior * f1 + (1 - prior) * f0)
    assert expert_risk(b, stable, det, anchor, prior) == pytest.approx(expect, rel=1e-10)


@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1000))
def test_identical_models_return_prior_exactly(prior, seed):
    rng = np.random.default_rng(seed)
    stable = StationaryGPParams(rng.normal(size=2), np.eye(2), 4.0, 0.3)
    det = WindowedGPParams.constant(stable, 1, 1e6)
    b = ObservationBlock(rng.integers(0, 2, 4), np.sort(rng.uniform(0, 10, 4)), rng.normal(size=4))
    assert expert_risk(b, stable, det, 0.0, prior) == prior


def test_expert_risk_monotone_in_prior():
    rng = np.random.default_rng(1)
    stable = StationaryGPParams([0.0], [[1.0]], 5.0, 0.2)
    det = WindowedGPParams((stable.with_mean(np.array([1.0])),), 48.0)
    b = ObservationBlock([0] * 5, np.arange(5.0), rng.normal(0.5, 1, 5))
    scores = [expert_risk(b, stable, det, 4.0, p) for p in np.linspace(0.1, 0.9, 9)]
    assert np.all(np.diff(scores) > 0)


def test_expert_risk_rejects_bad_prior():
    stable = StationaryGPParams.isotropic(1)
    det = WindowedGPParams.constant(stable, 1, 10.0)
    b = ObservationBlock([0], [0.0], [0.0])
    for p in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            expert_risk(b, stable, det, 0.0, p)


# --- aggregation ---------------------------------------------------------


def test_aggregate_example():
    # [TRIVIAL]
    assert aggregate_risk([0.25, 0.75], [0.2, 0.6]) == pytest.approx(0.5, rel=1e-15)
    assert aggregate_risk([2.0, 0.0], [0.3, 0.9]) == pytest.approx(0.3, rel=1e-15)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_aggregate_within_expert_range(seed, M):
    rng = np.random.default_rng(seed)
    beta = rng.dirichlet(np.ones(M))
    scores = rng.random(M)
    a = aggregate_risk(beta, scores)
    assert scores.min() <= a <= scores.max()


def test_aggregate_validates():
    with pytest.raises(ValueError):
        aggregate_risk([0.5], [0.1, 0.2])
    with pytest.raises(ValueError):
        aggregate_risk([0.0, 0.0], [0.1, 0.2])


# --- streams -------------------------------------------------------------


def test_score_times_schedules(schema):
    p = make_patient("x", schema, [0, 1, 0], [1.0, 1.0, 7.5], [0, 0, 0])
    np.testing.assert_array_equal(score_times(p), [1.0, 7.5])
    np.testing.assert_array_equal(score_times(p, 2.0), [1.0, 3.0, 5.0, 7.0])
    with pytest.raises(ValueError):
        score_times(p, 0.0)


def test_score_stream_rises_for_deteriorating_patient(schema):
    bundle = two_expert_bundle(schema)
    trace = score_stream(rising_patient(schema), bundle)
    np.testing.assert_array_equal(trace.beta_hat, [1.0, 0.0])
    np.testing.assert_array_equal(trace.aggregate, trace.per_expert[:, 0])
    assert trace.aggregate[-1] > 0.9 > trace.aggregate[0]
    assert trace.per_expert[-1, 1] < 0.05


def test_score_stream_causal(schema):
    # scores up to time t ignore later observations
    bundle = two_expert_bundle(schema)
    p = rising_patient(schema)
    full = score_stream(p, bundle)
    keep = p.time <= 20.0
    head = make_patient("r1", schema, p.stream[keep], p.time[keep], p.value[keep], stay=36.0)
    part = score_stream(head, bundle)
    np.testing.assert_array_equal(part.aggregate, full.aggregate[: part.aggregate.size])


def test_endpoint_matches_trace(schema):
    bundle = two_expert_bundle(schema)
    p = rising_patient(schema)
    trace = score_stream(p, bundle)
    assert endpoint_score(p, bundle) == trace.aggregate[-1]
    assert endpoint_score(p, bundle, "max") == trace.aggregate.max()
    with pytest.raises(ValueError):
        endpoint_score(p, bundle, "mean")


def test_whatif_gender_swap_changes_score(schema):
    bundle = two_expert_bundle(schema)
    w = whatif(rising_patient(schema), bundle, {"gender": "male"})
    np.testing.assert_array_equal(w.counterfactual.beta_hat, [0.0, 1.0])
    assert w.max_difference >= 0.05
    lines = w.to_csv().splitlines()
    assert lines[0] == "time_hours,aggregate_original,aggregate_whatif,beta_original_1,beta_original_2,beta_whatif_1,beta_whatif_2"
    assert len(lines) == len(w.original) + 1
    with pytest.raises(CohortError, match="valid names"):
        whatif(rising_patient(schema), bundle, {"bmi": 30})


def test_permuted_bundle_gives_same_aggregate(schema):
    bundle = two_expert_bundle(schema)
    p = rising_patient(schema)
    a = score_stream(p, bundle)
    b = score_stream(p, bundle.permuted([1, 0]))
    np.testing.assert_allclose(b.aggregate, a.aggregate, rtol=1e-12)
    np.testing.assert_array_equal(b.per_expert, a.per_expert[:, ::-1])


def test_normalization_applied_before_scoring(schema):
    # scaling raw values and the stored statistics together leaves scores unchanged
    bundle = two_expert_bundle(schema)
    p = rising_patient(schema)
    scaled_stats = NormalizationStats(np.array([80.0, 18.0]), np.array([10.0, 3.0]), np.zeros(schema.S), np.ones(schema.S))
    from dataclasses import replace

    b2 = replace(bundle, normalization=scaled_stats)
    raw = replace(p, value=np.where(p.stream == 0, 80.0 + 10.0 * p.value, 18.0 + 3.0 * p.value))
    np.testing.assert_allclose(score_stream(raw, b2).aggregate, score_stream(p, bundle).aggregate, rtol=1e-10)


def test_incompatible_inputs_rejected(schema):
    bundle = two_expert_bundle(schema)
    with pytest.raises(CohortError, match="stream names"):
        check_compatible(rising_patient(schema), bundle, ("hr", "spo2"))
    from gpexperts.cohort import AdmissionFeature, AdmissionSchema

    other = AdmissionSchema((AdmissionFeature("age", "numeric"),))
    p = make_patient("z", other, [0], [0.0], [0.0], admission={"age": 1.0})
    with pytest.raises(CohortError, match="manifest"):
        score_stream(p, bundle)


# --- persistence ---------------------------------------------------------


def test_bundle_round_trip_is_exact(tmp_path):
    bundle = two_expert_bundle(make_schema(), prior=0.0832)
    path = tmp_path / "model.json"
    bundle.save(path)
    back = ModelBundle.load(path)
    assert back.dumps() == bundle.dumps()
    d = json.loads(path.read_text())
    assert d["format"] == "gpexperts-bundle" and d["version"] == 1
    assert d["window_config"] == {"W": 4, "width_hours": 12.0}


def test_bundle_rejects_unknown_format():
    d = two_expert_bundle(make_schema()).to_dict()
    d["version"] = 99
    with pytest.raises(ValueError, match="version"):
        ModelBundle.from_dict(d)
    del d["format"]
    with pytest.raises(ValueError):
        ModelBundle.from_dict(d)


def test_trace_csv_and_plot_data(tmp_path, schema):
    trace = score_stream(rising_patient(schema), two_expert_bundle(schema))
    path = tmp_path / "r1.csv"
    write_trace(trace, path, plot_data=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "time_hours,expert_1,expert_2,aggregate"
    assert float(lines[-1].split(",")[-1]) == trace.aggregate[-1]
    plot = json.loads((tmp_path / "r1.plot.json").read_text())
    assert plot["aggregate"] == [float(x) for x in trace.aggregate]
    assert math.isclose(sum(plot["beta_hat"]), 1.0)
