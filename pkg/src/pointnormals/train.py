"""Training loop: sample k-point patches from surfaces with known normals,
canonicalize them, and fit the network with Adam under the sin loss.

Determinism: weight init draws from the run seed; each epoch's sampling uses
an rng spawned from (seed, epoch), so a resumed run continues bit-identically
to an unbroken one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .geometry import PointCloud
from .knn import KnnIndex, build_knn_index
from .model import (
    ModelConfig,
    build_param_tensors,
    forward_batch,
    init_weights,
    sin_loss,
)
from .optim import AdamState, adam_step
from .patches import (
    DegeneratePatchError,
    NormalizedPatch,
    build_neighbor_lists,
    extract_patch,
    normalize_patch,
)
from .synth import NOISE_LEVELS, CorruptionSpec, SyntheticShape, add_gaussian_noise, generate_synthetic_shape


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries where and the largest parameter norms."""

    def __init__(self, epoch: int, batch_index: int, param_norms: dict[str, float]):
        top = sorted(param_norms.items(), key=lambda kv: -kv[1])[:5]
        detail = ", ".join(f"{name}={norm:.3e}" for name, norm in top)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; "
            f"largest parameter norms: {detail}"
        )
        self.epoch = epoch
        self.batch_index = batch_index
        self.param_norms = param_norms


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale defaults; the full-scale setting (patch_size 700, 250
    epochs, 100k patches/epoch) is reachable through the same fields."""

    epochs: int = 30
    patches_per_epoch: int = 2048
    batch_size: int = 32
    patch_size: int = 128
    lr: float = 2e-4
    lr_decay: float = 0.995
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("epochs", "patches_per_epoch", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size > self.patches_per_epoch:
            raise ValueError("batch_size cannot exceed patches_per_epoch")
        if self.patch_size < self.model.graph_k:
            raise ValueError("patch_size must be >= model.graph_k")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "patches_per_epoch": self.patches_per_epoch,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "lr": self.lr,
            "lr_decay": self.lr_decay,
            "seed": self.seed,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["model"] = ModelConfig.from_dict(data["model"])
        return cls(**data)


@dataclass
class TrainResult:
    weights: dict[str, np.ndarray]
    history: list[tuple[int, float, float]]  # (epoch, mean_loss, lr)
    config: TrainConfig


def build_training_clouds(
    shapes: list[SyntheticShape],
    noise_fractions: tuple[float, ...] = NOISE_LEVELS,
    seed: int = 0,
) -> list[PointCloud]:
    """One cloud per (shape, noise level), equally mixed across levels."""
    clouds = []
    for si, shape in enumerate(shapes):
        clean = generate_synthetic_shape(shape)
        for ni, fraction in enumerate(noise_fractions):
            spec = CorruptionSpec(
                noise_sigma_fraction=fraction, seed=seed + 1000 * si + ni
            )
            clouds.append(add_gaussian_noise(clean, spec))
    return clouds


def sample_training_batch(
    clouds: list[PointCloud],
    config: TrainConfig,
    rng: np.random.Generator,
    indexes: list[KnnIndex] | None = None,
) -> list[tuple[NormalizedPatch, np.ndarray]]:
    """batch_size canonical-frame patches with ground-truth normals rotated
    into the patch frame (so denormalize_normal maps them back to world)."""
    for cloud in clouds:
        if cloud.normals is None:
            raise ValueError("training clouds must carry ground-truth normals")
        if len(cloud) < config.patch_size:
            raise ValueError(
                f"cloud of {len(cloud)} points is smaller than patch_size "
                f"{config.patch_size}"
            )
    if indexes is None:
        indexes = [build_knn_index(c.points) for c in clouds]
    batch = []
    while len(batch) < config.batch_size:
        ci = int(rng.integers(0, len(clouds)))
        qi = int(rng.integers(0, len(clouds[ci])))
        try:
            patch = extract_patch(clouds[ci], indexes[ci], qi, config.patch_size)
            normalized = normalize_patch(patch)
        except DegeneratePatchError:
            continue  # fully coincident patch: draw another query
        gt_frame = patch.gt_normals @ normalized.transform.rotation.T
        batch.append((normalized, gt_frame))
    return batch


def batch_arrays(
    batch: list[tuple[NormalizedPatch, np.ndarray]], model: ModelConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, np.ndarray]:
    """Stack a sampled batch into (positions, graph_nb, attn_nb, gt) arrays."""
    positions = np.stack([p.positions for p, _ in batch])
    gt = np.stack([g for _, g in batch])
    graph_nb = np.stack(
        [build_neighbor_lists(p.positions, model.graph_k) for p, _ in batch]
    )
    attn_nb = None
    if model.variant == "local_attention":
        attn_nb = np.stack(
            [build_neighbor_lists(p.positions, model.local_attention_k) for p, _ in batch]
        )
    return positions, graph_nb, attn_nb, gt


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))


def training_step(
    weights: dict[str, np.ndarray],
    state: AdamState,
    positions: np.ndarray,
    graph_nb: np.ndarray | None,
    attn_nb: np.ndarray | None,
    gt: np.ndarray,
    config: ModelConfig,
    lr: float,
) -> float:
    """One forward/backward/Adam update; returns the batch loss."""
    tape = ad.Tape(check_finite=False)
    params = build_param_tensors(tape, weights, requires_grad=True)
    pred = forward_batch(tape, params, tape.constant(positions), graph_nb, attn_nb, config)
    loss = sin_loss(pred, gt)
    value = float(loss.values)
    if not math.isfinite(value):
        raise FloatingPointError("non-finite loss")
    tape.backward(loss)
    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.values))
        for name, t in params.items()
    }
    adam_step(weights, grads, state, lr)
    return value


def _checkpoint_arrays(
    weights: dict[str, np.ndarray], state: AdamState, next_epoch: int
) -> dict[str, np.ndarray]:
    arrays = {f"param.{k}": v for k, v in weights.items()}
    arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    arrays["trainer.step"] = np.array([float(state.step)])
    arrays["trainer.next_epoch"] = np.array([float(next_epoch)])
    return arrays


def save_training_checkpoint(
    path, weights: dict[str, np.ndarray], state: AdamState, next_epoch: int, config: TrainConfig
) -> None:
    save_checkpoint(path, _checkpoint_arrays(weights, state, next_epoch), config.to_dict())


def load_training_checkpoint(path):
    """-> (weights, AdamState, next_epoch, TrainConfig)."""
    arrays, sidecar = load_checkpoint(path)
    if sidecar is None:
        raise ValueError(f"{path}: missing config sidecar")
    config = TrainConfig.from_dict(sidecar)
    weights = {k[len("param.") :]: v for k, v in arrays.items() if k.startswith("param.")}
    state = AdamState(
        m={k[len("adam.m.") :]: v for k, v in arrays.items() if k.startswith("adam.m.")},
        v={k[len("adam.v.") :]: v for k, v in arrays.items() if k.startswith("adam.v.")},
        step=int(arrays["trainer.step"][0]),
    )
    next_epoch = int(arrays["trainer.next_epoch"][0])
    return weights, state, next_epoch, config


def load_trained_model(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Weights + architecture from a training checkpoint, for inference."""
    weights, _, _, config = load_training_checkpoint(path)
    return weights, config.model


def _write_history(path, history: list[tuple[int, float, float]]) -> None:
    lines = ["epoch,mean_loss,lr"]
    lines += [f"{e},{loss:.17g},{lr:.17g}" for e, loss, lr in history]
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def train(
    config: TrainConfig,
    data: list,
    checkpoint_path=None,
    history_path=None,
    resume_from=None,
    checkpoint_every: int = 0,
    log=None,
) -> TrainResult:
    """Run the Adam loop over `data` (SyntheticShape specs or PointClouds).

    lr for epoch e is lr * lr_decay**e. The checkpoint (weights + optimizer
    state) is written every `checkpoint_every` epochs and at the end; a resumed
    run continues exactly where the checkpoint stopped.
    """
    clouds = [
        generate_synthetic_shape(item) if isinstance(item, SyntheticShape) else item
        for item in data
    ]
    if not clouds:
        raise ValueError("no training data")
    for cloud in clouds:
        if cloud.normals is None:
            raise ValueError("training clouds must carry ground-truth normals")
        if len(cloud) < config.patch_size:
            raise ValueError(
                f"cloud of {len(cloud)} points is smaller than patch_size "
                f"{config.patch_size}"
            )
    indexes = [build_knn_index(c.points) for c in clouds]

    history: list[tuple[int, float, float]] = []
    if resume_from is not None:
        weights, state, start_epoch, saved = load_training_checkpoint(resume_from)
        if saved.to_dict() != config.to_dict():
            raise ValueError("resume checkpoint was trained with a different config")
    else:
        weights = init_weights(config.model, config.seed)
        state = AdamState.fresh(weights)
        start_epoch = 0

    steps_per_epoch = config.patches_per_epoch // config.batch_size
    for epoch in range(start_epoch, config.epochs):
        lr = config.lr * config.lr_decay**epoch
        rng = _epoch_rng(config.seed, epoch)
        total = 0.0
        for step in range(steps_per_epoch):
            batch = sample_training_batch(clouds, config, rng, indexes)
            positions, graph_nb, attn_nb, gt = batch_arrays(batch, config.model)
            try:
                total += training_step(
                    weights, state, positions, graph_nb, attn_nb, gt, config.model, lr
                )
            except FloatingPointError:
                norms = {k: float(np.linalg.norm(v)) for k, v in weights.items()}
                raise TrainingDivergedError(epoch, step, norms) from None
        mean_loss = total / steps_per_epoch
        history.append((epoch, mean_loss, lr))
        if log is not None:
            log(f"epoch {epoch:4d}  loss {mean_loss:.6f}  lr {lr:.3e}")
        if history_path is not None:
            _write_history(history_path, history)
        if (
            checkpoint_path is not None
            and checkpoint_every > 0
            and (epoch + 1) % checkpoint_every == 0
        ):
            save_training_checkpoint(checkpoint_path, weights, state, epoch + 1, config)
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, weights, state, config.epochs, config)
    return TrainResult(weights, history, config)


def overfit_single_patch(
    positions: np.ndarray,
    gt_normals: np.ndarray,
    model: ModelConfig,
    steps: int = 500,
    lr: float = 1e-3,
    seed: int = 0,
) -> list[float]:
    """Drive the loss down on one fixed patch; returns the per-step losses.

    A capacity smoke test: with desk-scale dimensions the loss should fall
    below 1e-2 well within 500 steps.
    """
    positions = np.asarray(positions, dtype=np.float64)[None]
    gt = np.asarray(gt_normals, dtype=np.float64)[None]
    graph_nb = build_neighbor_lists(positions[0], model.graph_k)[None]
    attn_nb = None
    if model.variant == "local_attention":
        attn_nb = build_neighbor_lists(positions[0], model.local_attention_k)[None]
    weights = init_weights(model, seed)
    state = AdamState.fresh(weights)
    losses = []
    for _ in range(steps):
        losses.append(
            training_step(weights, state, positions, graph_nb, attn_nb, gt, model, lr)
        )
    return losses
