"""
Ablation tour: what each architectural stage buys
=================================================

Train the full model and two ablated variants (attention removed, graph
convolutions removed) with an identical tiny budget, then score all three
on a noisy held-out torus. With this little training the gaps are small
and can wobble; tests/test_acceptance.py runs the same comparison at desk
scale where the orderings are required to hold.

Run:  python3 demos/04_ablation_tour.py
"""

import time
from pathlib import Path

from pointnormals.evaluation import ModelEstimator, PcaEstimator, evaluate_cloud
from pointnormals.model import ModelConfig
from pointnormals.synth import CorruptionSpec, SyntheticShape, corrupt, generate_synthetic_shape
from pointnormals.train import TrainConfig, build_training_clouds, load_trained_model, train

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

shapes = [
    SyntheticShape(kind=kind, sample_count=3_000, seed=i)
    for i, kind in enumerate(("sphere", "plane", "saddle"))
]
clouds = build_training_clouds(shapes, noise_fractions=(0.0, 0.006), seed=0)

torus = generate_synthetic_shape(SyntheticShape(kind="torus", sample_count=4_000, seed=7))
noisy = corrupt(torus, CorruptionSpec(noise_sigma_fraction=0.006, seed=8))

results = {}
for variant in ("full", "no_transformer", "no_graph_conv"):
    config = TrainConfig(
        epochs=6,
        patches_per_epoch=512,
        batch_size=16,
        patch_size=32,
        lr=1e-3,
        lr_decay=0.9,
        seed=0,
        model=ModelConfig(variant=variant, num_blocks=2, feature_dim=16,
                          num_heads=4, graph_k=8),
    )
    ckpt = OUT / f"tour_{variant}.ckpt"
    start = time.time()
    train(config, clouds, checkpoint_path=ckpt, log=None)
    weights, model_config = load_trained_model(ckpt)
    report = evaluate_cloud(noisy, ModelEstimator(weights, model_config), k=32, stride=4)
    results[variant] = report.rmse_degrees
    print(f"{variant:<16} trained in {time.time() - start:5.0f}s   "
          f"rmse {report.rmse_degrees:6.3f} deg")

pca = evaluate_cloud(noisy, PcaEstimator(), k=32, stride=4).rmse_degrees
print(f"{'pca (baseline)':<16} {'':>16}   rmse {pca:6.3f} deg")

print("\nvariants from best to worst at this budget:")
for variant, rmse in sorted(results.items(), key=lambda item: item[1]):
    print(f"  {rmse:6.3f}  {variant}")
