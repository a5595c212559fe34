"""Normal-estimation network: enhanced graph convolutions interleaved with
transformer encoder layers, a normal head, the sin loss, and ablation variants.

All layer functions take Tensors shaped (B, k, ·) for B patches of k points;
2-D single-patch inputs are promoted to a batch of one. Weights live in a flat
name -> array dict whose names and shapes are fully determined by ModelConfig
(see weight_spec), so checkpoints round-trip exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .patches import NormalizedPatch, build_neighbor_lists

VARIANTS = ("full", "no_transformer", "no_graph_conv", "local_attention", "csa")

# Edge-feature blocks in the order they are concatenated; "xyz" contributes
# both the center and neighbor coordinates.
GRAPH_FEATURE_ORDER = ("delta_xyz", "xyz", "f", "delta_f")

ATTENTION_MASK_VALUE = -1e30  # additive mask; underflows to exactly 0 after softmax


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; defaults are the desk-scale setting."""

    num_blocks: int = 3
    feature_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 0  # 0 means 2 * feature_dim
    graph_k: int = 16
    variant: str = "full"
    local_attention_k: int = 16
    graph_features: tuple[str, ...] = GRAPH_FEATURE_ORDER

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.feature_dim % self.num_heads != 0:
            raise ValueError(
                f"feature_dim {self.feature_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.graph_k < 2 or self.local_attention_k < 2:
            raise ValueError("graph_k and local_attention_k must be >= 2")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 2 * self.feature_dim)
        if self.ffn_dim < 1:
            raise ValueError("ffn_dim must be positive")
        feats = tuple(f for f in GRAPH_FEATURE_ORDER if f in self.graph_features)
        unknown = set(self.graph_features) - set(GRAPH_FEATURE_ORDER)
        if unknown:
            raise ValueError(f"unknown graph features: {sorted(unknown)}")
        if not feats:
            raise ValueError("graph_features must not be empty")
        object.__setattr__(self, "graph_features", feats)

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "feature_dim": self.feature_dim,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "graph_k": self.graph_k,
            "variant": self.variant,
            "local_attention_k": self.local_attention_k,
            "graph_features": list(self.graph_features),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "graph_features" in data:
            data["graph_features"] = tuple(data["graph_features"])
        return cls(**data)


def edge_feature_dim(config: ModelConfig) -> int:
    sizes = {
        "delta_xyz": 3,
        "xyz": 6,
        "f": config.feature_dim,
        "delta_f": config.feature_dim,
    }
    return sum(sizes[name] for name in config.graph_features)


def weight_spec(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Exact name -> shape map for every parameter of the configured model."""
    f = config.feature_dim
    spec: dict[str, tuple[int, ...]] = {
        "embed.w1": (3, f),
        "embed.b1": (f,),
        "embed.w2": (f, f),
        "embed.b2": (f,),
    }
    for i in range(config.num_blocks):
        if config.variant != "no_graph_conv":
            d_in = edge_feature_dim(config)
            spec[f"block{i}.gc.w1"] = (d_in, f)
            spec[f"block{i}.gc.b1"] = (f,)
            spec[f"block{i}.gc.w2"] = (f, f)
            spec[f"block{i}.gc.b2"] = (f,)
        if config.variant in ("full", "no_graph_conv", "local_attention"):
            for proj in ("wq", "wk", "wv", "wo"):
                spec[f"block{i}.attn.{proj}"] = (f, f)
            # No key bias: a constant added to every key shifts each score row
            # uniformly and cancels in the softmax, so it would be untrainable.
            for bias in ("bq", "bv", "bo"):
                spec[f"block{i}.attn.{bias}"] = (f,)
            spec[f"block{i}.ln1.gamma"] = (f,)
            spec[f"block{i}.ln1.beta"] = (f,)
            spec[f"block{i}.ffn.w1"] = (f, config.ffn_dim)
            spec[f"block{i}.ffn.b1"] = (config.ffn_dim,)
            spec[f"block{i}.ffn.w2"] = (config.ffn_dim, f)
            spec[f"block{i}.ffn.b2"] = (f,)
            spec[f"block{i}.ln2.gamma"] = (f,)
            spec[f"block{i}.ln2.beta"] = (f,)
        elif config.variant == "csa":
            spec[f"block{i}.csa.psi.w1"] = (f, f)
            spec[f"block{i}.csa.psi.b1"] = (f,)
            spec[f"block{i}.csa.psi.w2"] = (f, f)
            spec[f"block{i}.csa.psi.b2"] = (f,)
            spec[f"block{i}.csa.phi.w1"] = (2 * f, f)
            spec[f"block{i}.csa.phi.b1"] = (f,)
            spec[f"block{i}.csa.phi.w2"] = (f, f)
            spec[f"block{i}.csa.phi.b2"] = (f,)
    spec["head.w1"] = (f, f)
    spec["head.b1"] = (f,)
    spec["head.w2"] = (f, 3)
    spec["head.b2"] = (3,)
    return spec


def init_weights(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in weight_spec(config).items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith("gamma"):
            weights[name] = np.ones(shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


def build_param_tensors(
    tape: Tape, weights: dict[str, np.ndarray], requires_grad: bool = True
) -> dict[str, Tensor]:
    return {name: tape.tensor(w, requires_grad=requires_grad) for name, w in weights.items()}


def _mlp2(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """Two-layer MLP: W2 · relu(W1 · x + b1) + b2."""
    hidden = ad.relu(ad.add_bias(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add_bias(ad.matmul(hidden, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.values.ndim == 2:
        return ad.reshape(x, (1,) + x.values.shape), True
    return x, False


def _batch_neighbors(neighbor_lists: np.ndarray) -> np.ndarray:
    neighbor_lists = np.asarray(neighbor_lists, dtype=np.int64)
    if neighbor_lists.ndim == 2:
        return neighbor_lists[None]
    return neighbor_lists


def enhanced_graph_conv(
    positions: Tensor,
    features: Tensor,
    neighbor_lists: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    config: ModelConfig,
) -> Tensor:
    """Max over neighbors of an MLP on edge features [xj−xc, xc, xj, fj, fj−fc].

    The edge-feature blocks present (and their order) follow
    config.graph_features; positions/features are (B, k, 3)/(B, k, F) or their
    single-patch 2-D forms.
    """
    positions, squeeze = _as_batched(positions)
    features, _ = _as_batched(features)
    nb = _batch_neighbors(neighbor_lists)
    batch, k, g = nb.shape
    flat_nb = nb.reshape(batch, k * g)

    xc = ad.repeat_rows(positions, g)
    xj = ad.gather_nodes(positions, flat_nb)
    fc = ad.repeat_rows(features, g)
    fj = ad.gather_nodes(features, flat_nb)
    parts = []
    for name in config.graph_features:
        if name == "delta_xyz":
            parts.append(ad.sub(xj, xc))
        elif name == "xyz":
            parts.extend([xc, xj])
        elif name == "f":
            parts.append(fj)
        elif name == "delta_f":
            parts.append(ad.sub(fj, fc))
    edges = _mlp2(ad.concat(parts), params, prefix)
    f_out = edges.values.shape[-1]
    pooled = ad.reduce_max(ad.reshape(edges, (batch * k, g, f_out)), axis=1)
    out = ad.reshape(pooled, (batch, k, f_out))
    return ad.reshape(out, (k, f_out)) if squeeze else out


def _local_attention_mask(neighbor_lists: np.ndarray, k: int) -> np.ndarray:
    """Additive (B, k, k) mask: 0 on listed neighbors, a large negative
    elsewhere, so masked slots underflow to exactly zero attention."""
    nb = _batch_neighbors(neighbor_lists)
    mask = np.full((nb.shape[0], k, k), ATTENTION_MASK_VALUE)
    np.put_along_axis(mask, nb, 0.0, axis=2)
    return mask


def _attention_sublayer(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    config: ModelConfig,
    mask: np.ndarray | None,
) -> Tensor:
    q = ad.add_bias(ad.matmul(x, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    key = ad.matmul(x, params[f"{prefix}.wk"])
    v = ad.add_bias(ad.matmul(x, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    d_head = config.feature_dim // config.num_heads
    mask_t = x.tape.constant(mask) if mask is not None else None
    heads = []
    for h in range(config.num_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        qh = ad.slice_last(q, lo, hi)
        kh = ad.slice_last(key, lo, hi)
        vh = ad.slice_last(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / math.sqrt(d_head))
        if mask_t is not None:
            scores = ad.add(scores, mask_t)
        heads.append(ad.matmul(ad.softmax_rows(scores), vh))
    merged = heads[0] if len(heads) == 1 else ad.concat(heads)
    return ad.add_bias(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _encoder_layer(
    x: Tensor,
    params: dict[str, Tensor],
    block: str,
    config: ModelConfig,
    mask: np.ndarray | None,
) -> Tensor:
    attn = _attention_sublayer(x, params, f"{block}.attn", config, mask)
    x = ad.layer_norm(
        ad.add(x, attn), params[f"{block}.ln1.gamma"], params[f"{block}.ln1.beta"]
    )
    ffn = _mlp2(x, params, f"{block}.ffn")
    return ad.layer_norm(
        ad.add(x, ffn), params[f"{block}.ln2.gamma"], params[f"{block}.ln2.beta"]
    )


def transformer_encoder_layer(
    features: Tensor, params: dict[str, Tensor], prefix: str, config: ModelConfig
) -> Tensor:
    """Post-norm encoder layer: global multi-head self-attention over all
    patch points, then a feed-forward sublayer, each with residual + norm."""
    features, squeeze = _as_batched(features)
    out = _encoder_layer(features, params, prefix, config, mask=None)
    return ad.reshape(out, out.values.shape[1:]) if squeeze else out


def local_attention_layer(
    features: Tensor,
    neighbor_lists: np.ndarray,
    params: dict[str, Tensor],
    prefix: str,
    config: ModelConfig,
) -> Tensor:
    """Encoder layer whose attention is restricted to each point's neighbor
    list; with m = k neighbors it reproduces the global layer exactly."""
    features, squeeze = _as_batched(features)
    k = features.values.shape[1]
    nb = _batch_neighbors(neighbor_lists)
    if nb.min() < 0 or nb.max() >= k:
        raise IndexError("neighbor index out of range")
    mask = _local_attention_mask(nb, k)
    out = _encoder_layer(features, params, prefix, config, mask)
    return ad.reshape(out, out.values.shape[1:]) if squeeze else out


def csa_layer(
    features_large: Tensor,
    features_small: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    subset_idx: np.ndarray | None = None,
) -> Tensor:
    """Cascaded scale aggregation: fuse a max-pooled summary of the
    larger-scale features into each smaller-scale feature row.

    `subset_idx`, when given, maps small-scale rows to their large-scale row
    and is bounds-checked (the small set must be a subset of the large set).
    """
    features_large, _ = _as_batched(features_large)
    features_small, squeeze = _as_batched(features_small)
    k_large = features_large.values.shape[1]
    k_small = features_small.values.shape[1]
    if subset_idx is not None:
        subset_idx = np.asarray(subset_idx, dtype=np.int64)
        if subset_idx.shape[-1] != k_small:
            raise ValueError("subset_idx length must match the small-scale point count")
        if subset_idx.min() < 0 or subset_idx.max() >= k_large:
            raise ValueError("small-scale set is not a subset of the large-scale set")
    elif k_small > k_large:
        raise ValueError("small-scale set cannot exceed the large-scale set")
    batch, _, f = features_large.values.shape
    pooled = ad.reduce_max(features_large, axis=1)
    summary = _mlp2(ad.reshape(pooled, (batch, 1, f)), params, f"{prefix}.psi")
    summary = ad.broadcast_rows(summary, k_small)
    out = _mlp2(ad.concat([summary, features_small]), params, f"{prefix}.phi")
    return ad.reshape(out, out.values.shape[1:]) if squeeze else out


def forward_batch(
    tape: Tape,
    params: dict[str, Tensor],
    positions: Tensor,
    graph_neighbors: np.ndarray | None,
    attn_neighbors: np.ndarray | None,
    config: ModelConfig,
) -> Tensor:
    """Predict unit normals for a batch of normalized patches.

    positions: (B, k, 3) canonical-frame coordinates; graph_neighbors: (B, k,
    graph_k) lists (unused by no_graph_conv); attn_neighbors: (B, k,
    local_attention_k), required only by the local_attention variant. The
    neighbor structure is built once from patch coordinates and reused by
    every block (static graph).
    """
    x = _mlp2(positions, params, "embed")
    for i in range(config.num_blocks):
        block = f"block{i}"
        if config.variant != "no_graph_conv":
            if graph_neighbors is None:
                raise ValueError("graph_neighbors required for this variant")
            x = enhanced_graph_conv(
                positions, x, graph_neighbors, params, f"{block}.gc", config
            )
        if config.variant in ("full", "no_graph_conv"):
            x = _encoder_layer(x, params, block, config, mask=None)
        elif config.variant == "local_attention":
            if attn_neighbors is None:
                raise ValueError("attn_neighbors required for local_attention")
            k = x.values.shape[1]
            x = _encoder_layer(
                x, params, block, config, _local_attention_mask(attn_neighbors, k)
            )
        elif config.variant == "csa":
            x = csa_layer(x, x, params, f"{block}.csa")
    return ad.normalize_rows(_mlp2(x, params, "head"))


def forward(
    patch: NormalizedPatch, weights: dict[str, np.ndarray], config: ModelConfig
) -> np.ndarray:
    """Predicted unit normals (k, 3) for one normalized patch."""
    pts = np.asarray(patch.positions, dtype=np.float64)
    k = len(pts)
    if k < config.graph_k:
        raise ValueError(f"patch of {k} points is smaller than graph_k={config.graph_k}")
    graph_nb = build_neighbor_lists(pts, config.graph_k)[None]
    attn_nb = None
    if config.variant == "local_attention":
        attn_nb = build_neighbor_lists(pts, config.local_attention_k)[None]
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    out = forward_batch(tape, params, tape.constant(pts[None]), graph_nb, attn_nb, config)
    return out.values[0]


def sin_loss(predicted: Tensor, ground_truth: np.ndarray) -> Tensor:
    """Mean over points of ‖n̂ × n‖ — the sine of the angle for unit rows,
    insensitive to the sign of either normal."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gt.shape != predicted.values.shape:
        raise ValueError(
            f"shape mismatch: predicted {predicted.values.shape} vs ground truth {gt.shape}"
        )
    cross = ad.cross_rows(predicted, predicted.tape.constant(gt))
    return ad.mean_all(ad.norm_rows(cross))
