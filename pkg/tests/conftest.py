import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gpexperts.cohort import AdmissionFeature, AdmissionSchema, AdmissionVector, Cohort, PatientRecord

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_schema():
    return AdmissionSchema(
        (
            AdmissionFeature("age", "numeric"),
            AdmissionFeature("gender", "categorical", ("female", "male")),
            AdmissionFeature("unit", "categorical", ("medicine", "oncology", "cardiology")),
        )
    )


@pytest.fixture
def schema():
    return make_schema()


def make_patient(pid, schema, stream, time, value, outcome=0, stay=None, admission=None):
    admission = admission or {"age": 60.0, "gender": "female", "unit": "medicine"}
    time = np.asarray(time, dtype=float)
    return PatientRecord(
        pid,
        np.asarray(stream),
        time,
        np.asarray(value, dtype=float),
        AdmissionVector.from_raw(admission, schema),
        float(stay if stay is not None else time.max() + 1.0),
        outcome,
    )


@pytest.fixture
def tiny_cohort(schema):
    rng = np.random.default_rng(0)
    patients = []
    for i in range(6):
        n = 5 + i
        patients.append(
            make_patient(
                f"p{i}",
                schema,
                rng.integers(0, 2, n),
                np.sort(rng.uniform(0, 20, n)),
                rng.normal(size=n) + 10 * (i % 2),
                outcome=int(i >= 4),
                admission={"age": 40.0 + 5 * i, "gender": ("female", "male")[i % 2], "unit": "oncology"},
            )
        )
    return Cohort(tuple(patients), ("hr", "rr"), schema)


def two_expert_bundle(schema, prior=0.1):
    """Hand-built bundle: expert 0 deteriorates upward, expert 1 downward.

    The regressor sends female admissions to expert 0 and male ones to
    expert 1, so flipping ``gender`` swaps the expert that scores the patient.
    """
    from gpexperts.cohort import NormalizationStats
    from gpexperts.mixture import StableMixture
    from gpexperts.mtgp import StationaryGPParams, WindowedGPParams
    from gpexperts.scoring import ModelBundle
    from gpexperts.transfer import DeterioratingExpertSet, ResponsibilityRegressor

    stable = StationaryGPParams(np.zeros(2), np.eye(2), 6.0, 0.1)
    up = WindowedGPParams(tuple(stable.with_mean(np.full(2, 0.5 * (w + 1))) for w in range(4)), 12.0)
    down = WindowedGPParams(tuple(stable.with_mean(np.full(2, -0.5 * (w + 1))) for w in range(4)), 12.0)
    W = np.zeros((schema.S, 2))
    W[-1, 0] = 1.0  # intercept
    W[1, 0], W[1, 1] = -1.0, 1.0  # gender=male
    return ModelBundle(
        StableMixture((stable, stable), np.array([0.5, 0.5])),
        DeterioratingExpertSet((up, down), (10, 10), 0),
        ResponsibilityRegressor(W, schema),
        NormalizationStats.identity(2, schema.S),
        prior,
        ("hr", "rr"),
    )
