"""
Evaluate on a held-out shape and export an error heatmap
========================================================

Score the small model from demo 02 on a torus it never saw during
training, compare against the PCA baseline at the same neighborhood size,
and write a color-coded PLY anyone can open in MeshLab/CloudCompare
(blue = exact, red = 60 degrees or worse).

Run:  python3 demos/03_evaluate_and_heatmap.py
"""

import runpy
from pathlib import Path

from pointnormals.evaluation import (
    ModelEstimator,
    PcaEstimator,
    evaluate_cloud,
    export_error_heatmap,
)
from pointnormals.geometry import angular_errors, load_point_cloud
from pointnormals.synth import CorruptionSpec, SyntheticShape, corrupt, generate_synthetic_shape
from pointnormals.train import load_trained_model

OUT = Path(__file__).parent / "out"
CKPT = OUT / "small.ckpt"

if not CKPT.exists():
    print("no checkpoint yet; running demo 02 first\n")
    runpy.run_path(str(Path(__file__).parent / "02_train_small_model.py"))
    print()

weights, model_config = load_trained_model(CKPT)
model = ModelEstimator(weights, model_config)

# Held out: the torus never appears in the training mix.
torus = generate_synthetic_shape(SyntheticShape(kind="torus", sample_count=4_000, seed=7))
noisy = corrupt(torus, CorruptionSpec(noise_sigma_fraction=0.006, seed=8))

k = 32  # match the patch size the model was trained with
for label, cloud in (("clean", torus), ("noisy", noisy)):
    for estimator in (PcaEstimator(), model):
        report = evaluate_cloud(cloud, estimator, k=k, stride=4)
        pgp5 = dict(report.pgp)[5.0]
        print(f"torus/{label:<6} {estimator.name:<6} "
              f"rmse {report.rmse_degrees:6.3f} deg   PGP@5 {100 * pgp5:5.1f}%")

# Heatmap of the model's per-point error on the noisy torus.
report = evaluate_cloud(noisy, model, k=k)
heatmap = OUT / "torus_model_error.ply"
export_error_heatmap(noisy, report.per_point_errors, heatmap)
report.to_json(OUT / "torus_model_report.json")
print(f"\nheatmap -> {heatmap}")
print(f"report  -> {OUT / 'torus_model_report.json'}")
