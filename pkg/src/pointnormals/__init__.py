"""Surface-normal estimation for point clouds: a transformer/graph-conv
regression model with classical PCA and jet-fitting baselines, synthetic
training data, metrics, and a CLI."""

__version__ = "0.1.0"

from .geometry import (
    PointCloud,
    PointCloudFormatError,
    angular_error,
    angular_errors,
    covariance_eigendecomposition,
    jacobi_eigh_3x3,
    load_point_cloud,
    load_vectors,
    save_point_cloud,
    save_vectors,
)
from .knn import KnnIndex, build_knn_index, query_knn
from .patches import (
    DegeneratePatchError,
    NormalizedPatch,
    Patch,
    PatchTransform,
    build_neighbor_lists,
    denormalize_normal,
    extract_patch,
    normalize_patch,
)
from .classical import (
    JetCoefficients,
    estimate_normal_jet,
    estimate_normal_pca,
    fit_jet,
    jet_exponents,
    jet_normal,
)
from .autodiff import Tape, Tensor, finite_difference_check
from .optim import AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import (
    ModelConfig,
    csa_layer,
    enhanced_graph_conv,
    forward,
    forward_batch,
    init_weights,
    local_attention_layer,
    sin_loss,
    transformer_encoder_layer,
    weight_spec,
)
from .synth import (
    CorruptionSpec,
    SyntheticShape,
    add_gaussian_noise,
    apply_density_variation,
    corrupt,
    generate_synthetic_shape,
)
from .train import (
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    build_training_clouds,
    load_trained_model,
    overfit_single_patch,
    sample_training_batch,
    train,
)
from .evaluation import (
    EvalReport,
    JetEstimator,
    ModelEstimator,
    PcaEstimator,
    benchmark_inference,
    estimate_normals,
    evaluate_cloud,
    export_error_heatmap,
    pgp_curve,
    rmse,
)
