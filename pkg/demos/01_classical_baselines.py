"""
Classical baselines: PCA plane fit vs polynomial jet fit
========================================================

Estimate surface normals on a synthetic sphere with the two classical
estimators and watch how measurement noise changes the picture: the jet
fit models curvature and wins on clean data, while on noisy data both
lean on the size of the neighborhood.

Run:  python3 demos/01_classical_baselines.py
"""

import numpy as np

from pointnormals.evaluation import JetEstimator, PcaEstimator, evaluate_cloud
from pointnormals.synth import CorruptionSpec, SyntheticShape, corrupt, generate_synthetic_shape

# A sphere with analytic ground-truth normals (every normal is just the
# surface point divided by the radius, so scoring is exact).
clean = generate_synthetic_shape(SyntheticShape(kind="sphere", sample_count=5_000, seed=1))

# The same sphere with Gaussian noise at 0.6% of the bounding-box diagonal —
# the mid noise level used throughout the evaluation protocol.
noisy = corrupt(clean, CorruptionSpec(noise_sigma_fraction=0.006, seed=2))

print(f"{'cloud':<8} {'estimator':<10} {'k':>4} {'RMSE (deg)':>12} {'PGP@10 (%)':>12}")
for label, cloud in (("clean", clean), ("noisy", noisy)):
    for estimator in (PcaEstimator(), JetEstimator(order=2)):
        for k in (16, 64):
            report = evaluate_cloud(cloud, estimator, k=k, stride=10)
            pgp10 = dict(report.pgp)[10.0]
            print(f"{label:<8} {estimator.name:<10} {k:>4} "
                  f"{report.rmse_degrees:>12.3f} {100 * pgp10:>12.1f}")

print()
print("On the clean sphere the order-2 jet is nearly exact (it absorbs the")
print("curvature the plane fit cannot), while on the noisy sphere a larger")
print("neighborhood matters more than the estimator family.")
