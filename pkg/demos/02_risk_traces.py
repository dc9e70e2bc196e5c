"""
Training a bundle and scoring patients
======================================

Fit the full model on a synthetic ward, then follow the risk trace of a
deteriorating and a stable patient.
"""

import numpy as np

from gpexperts import TrainConfig, score_stream, train_bundle
from gpexperts.synth import generate_cohort, paper_like_preset

cfg = paper_like_preset(n_classes=2, deteriorating_fraction=0.15, stay_median_hours=24.0,
                        stay_max_hours=48.0, heterogeneity="crossed", det_noise_boost=1.0)
train, _ = generate_cohort(cfg, 300, seed=1)
test, latent = generate_cohort(cfg, 20, seed=2)

bundle, summary = train_bundle(train, TrainConfig(m_max=3, n_windows=2, window_width_hours=24.0))
print("experts:", summary.selected_M, " partition sizes:", summary.partition_sizes)
print("class prior:", round(bundle.class_prior, 3))

# one patient of each outcome
sick = next(p for p in test.patients if p.outcome == 1)
well = next(p for p in test.patients if p.outcome == 0)

for p in (sick, well):
    trace = score_stream(p, bundle, schedule=4.0)
    print(f"\npatient {p.id} (outcome {p.outcome}), beta_hat = {np.round(trace.beta_hat, 2)}")
    for t, r in zip(trace.times, trace.aggregate):
        print(f"  t = {t:5.1f} h   risk = {r:.3f}")
