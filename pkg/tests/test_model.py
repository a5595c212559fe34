"""Network building blocks against hand-computed closed forms and the
permutation/masking/limiting-case identities each layer must satisfy."""

import math

import numpy as np
import pytest

import pointnormals.autodiff as ad
from pointnormals.autodiff import Tape, finite_difference_check
from pointnormals.checkpoint import load_checkpoint, save_checkpoint
from pointnormals.model import (
    GRAPH_FEATURE_ORDER,
    ModelConfig,
    _attention_sublayer,
    build_param_tensors,
    csa_layer,
    edge_feature_dim,
    enhanced_graph_conv,
    forward,
    forward_batch,
    init_weights,
    local_attention_layer,
    sin_loss,
    transformer_encoder_layer,
    weight_spec,
)
from pointnormals.patches import NormalizedPatch, PatchTransform, build_neighbor_lists


def _tiny_config(**overrides) -> ModelConfig:
    base = dict(num_blocks=2, feature_dim=8, num_heads=2, graph_k=4, local_attention_k=4)
    base.update(overrides)
    return ModelConfig(**base)


def _patch(rng, k=16) -> NormalizedPatch:
    positions = rng.normal(size=(k, 3))
    positions[0] = 0.0
    positions /= np.abs(positions).max()
    return NormalizedPatch(positions, PatchTransform(np.zeros(3), np.eye(3), 1.0))


def _mlp2_numpy(x, w, prefix):
    hidden = np.maximum(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"], 0.0)
    return hidden @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


# --- configuration ------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(graph_k=1)
    with pytest.raises(ValueError):
        ModelConfig(variant="bogus")
    with pytest.raises(ValueError):
        ModelConfig(graph_features=("xyz", "nope"))
    with pytest.raises(ValueError):
        ModelConfig(graph_features=())


def test_config_defaults_and_roundtrip():
    config = ModelConfig()
    assert config.ffn_dim == 2 * config.feature_dim
    assert config.graph_features == GRAPH_FEATURE_ORDER
    assert ModelConfig.from_dict(config.to_dict()) == config
    subset = ModelConfig(graph_features=("f", "xyz"))  # stored in canonical order
    assert subset.graph_features == ("xyz", "f")


def test_edge_feature_dim():
    f = ModelConfig().feature_dim
    assert edge_feature_dim(ModelConfig()) == 3 + 6 + f + f
    assert edge_feature_dim(ModelConfig(graph_features=("delta_xyz",))) == 3
    assert edge_feature_dim(ModelConfig(graph_features=("xyz", "delta_xyz", "f"))) == 3 + 6 + f


# --- weights ---------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "no_transformer", "no_graph_conv", "local_attention", "csa"])
def test_weight_spec_matches_init(variant):
    config = _tiny_config(variant=variant)
    spec = weight_spec(config)
    weights = init_weights(config, seed=0)
    assert set(weights) == set(spec)
    for name, shape in spec.items():
        assert weights[name].shape == shape, name
    # biases start at zero, layer-norm gains at one
    for name, arr in weights.items():
        if name.endswith("gamma"):
            np.testing.assert_array_equal(arr, np.ones_like(arr))
        elif arr.ndim == 1:
            np.testing.assert_array_equal(arr, np.zeros_like(arr))


def test_weights_roundtrip_through_checkpoint(tmp_path):
    config = _tiny_config()
    weights = init_weights(config, seed=3)
    save_checkpoint(tmp_path / "w.ckpt", weights, config.to_dict())
    loaded, meta = load_checkpoint(tmp_path / "w.ckpt")
    assert ModelConfig.from_dict(meta) == config
    assert set(loaded) == set(weights)
    for name in weights:
        np.testing.assert_array_equal(loaded[name], weights[name])


def test_init_is_deterministic_per_seed():
    config = _tiny_config()
    a = init_weights(config, seed=7)
    b = init_weights(config, seed=7)
    c = init_weights(config, seed=8)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert any(not np.array_equal(a[n], c[n]) for n in a)


# --- enhanced graph conv ------------------------------------------------------------


def test_graph_conv_self_edge_closed_form():
    # g=1 neighbor lists are the self edge: delta_xyz and delta_f vanish and
    # the edge input is [0, x_c, x_c, f_c, 0]; with one edge per point the max
    # is the identity, so the output is just the edge MLP of that vector
    rng = np.random.default_rng(0)
    config = _tiny_config()
    weights = init_weights(config, seed=1)
    weights["block0.gc.b1"] += 0.05  # live relu units make the check non-trivial
    k, f = 6, config.feature_dim
    positions = rng.normal(size=(k, 3))
    features = rng.normal(size=(k, f))
    nb = np.arange(k, dtype=np.int64)[:, None]

    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    out = enhanced_graph_conv(
        tape.constant(positions), tape.constant(features), nb, params, "block0.gc", config
    ).values

    edge_input = np.concatenate(
        [np.zeros((k, 3)), positions, positions, features, np.zeros((k, f))], axis=1
    )
    expected = _mlp2_numpy(edge_input, weights, "block0.gc")
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_graph_conv_feature_subset_layout():
    # graph_features {xyz, delta_xyz, f} -> edge input [x_j - x_c, x_c, x_j, f_j]
    rng = np.random.default_rng(1)
    config = _tiny_config(graph_features=("xyz", "delta_xyz", "f"))
    assert config.graph_features == ("delta_xyz", "xyz", "f")
    weights = init_weights(config, seed=2)
    weights["block0.gc.b1"] += 0.05
    k, g, f = 5, 3, config.feature_dim
    positions = rng.normal(size=(k, 3))
    features = rng.normal(size=(k, f))
    nb = build_neighbor_lists(positions, g)

    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    out = enhanced_graph_conv(
        tape.constant(positions), tape.constant(features), nb, params, "block0.gc", config
    ).values

    expected = np.empty((k, f))
    for c in range(k):
        edges = []
        for j in nb[c]:
            edge = np.concatenate(
                [positions[j] - positions[c], positions[c], positions[j], features[j]]
            )
            edges.append(_mlp2_numpy(edge[None], weights, "block0.gc")[0])
        expected[c] = np.max(edges, axis=0)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_graph_conv_permutation_equivariance():
    rng = np.random.default_rng(2)
    config = _tiny_config()
    weights = init_weights(config, seed=3)
    k = 10
    positions = rng.normal(size=(k, 3))
    features = rng.normal(size=(k, config.feature_dim))
    nb = build_neighbor_lists(positions, config.graph_k)
    perm = rng.permutation(k)
    inverse = np.argsort(perm)
    permuted_nb = inverse[nb[perm]]  # same graph expressed in permuted labels

    def run(pos, feat, lists):
        tape = Tape()
        params = build_param_tensors(tape, weights, requires_grad=False)
        return enhanced_graph_conv(
            tape.constant(pos), tape.constant(feat), lists, params, "block0.gc", config
        ).values

    base = run(positions, features, nb)
    permuted = run(positions[perm], features[perm], permuted_nb)
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_graph_conv_rejects_bad_neighbor_index():
    config = _tiny_config()
    weights = init_weights(config, seed=4)
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    positions = tape.constant(np.zeros((4, 3)))
    features = tape.constant(np.zeros((4, config.feature_dim)))
    nb = np.array([[0, 9], [1, 0], [2, 0], [3, 0]])
    with pytest.raises(IndexError):
        enhanced_graph_conv(positions, features, nb, params, "block0.gc", config)


# --- attention layers ------------------------------------------------------------


def _run_layer(fn, features, weights, config, *args):
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    return fn(tape.constant(features), *args, params, "block0", config).values


def test_encoder_identical_rows_stay_identical():
    rng = np.random.default_rng(3)
    config = _tiny_config()
    weights = init_weights(config, seed=5)
    row = rng.normal(size=config.feature_dim)
    features = np.tile(row, (7, 1))
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    out = transformer_encoder_layer(tape.constant(features), params, "block0", config).values
    np.testing.assert_allclose(out, np.tile(out[0], (7, 1)), atol=1e-12)


def test_encoder_permutation_equivariance():
    rng = np.random.default_rng(4)
    config = _tiny_config()
    weights = init_weights(config, seed=6)
    features = rng.normal(size=(9, config.feature_dim))
    perm = rng.permutation(9)

    def run(feat):
        tape = Tape()
        params = build_param_tensors(tape, weights, requires_grad=False)
        return transformer_encoder_layer(tape.constant(feat), params, "block0", config).values

    np.testing.assert_allclose(run(features[perm]), run(features)[perm], atol=1e-12)


def test_local_attention_full_neighborhood_equals_global():
    rng = np.random.default_rng(5)
    config = _tiny_config(local_attention_k=4)
    weights = init_weights(config, seed=7)
    k = 8
    features = rng.normal(size=(k, config.feature_dim))
    all_neighbors = np.tile(np.arange(k), (k, 1))

    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    global_out = transformer_encoder_layer(tape.constant(features), params, "block0", config).values
    local_out = local_attention_layer(
        tape.constant(features), all_neighbors, params, "block0", config
    ).values
    np.testing.assert_allclose(local_out, global_out, atol=1e-12)


def test_local_attention_self_only_is_value_projection():
    rng = np.random.default_rng(6)
    config = _tiny_config()
    weights = init_weights(config, seed=8)
    for name in weights:
        if weights[name].ndim == 1 and "gamma" not in name:
            weights[name] = rng.normal(size=weights[name].shape) * 0.1
    k = 5
    features = rng.normal(size=(k, config.feature_dim))
    self_only = np.arange(k)[:, None]

    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    from pointnormals.model import _local_attention_mask

    attn = _attention_sublayer(
        ad.reshape(tape.constant(features), (1, k, config.feature_dim)),
        params,
        "block0.attn",
        config,
        _local_attention_mask(self_only, k),
    ).values[0]
    value = features @ weights["block0.attn.wv"] + weights["block0.attn.bv"]
    expected = value @ weights["block0.attn.wo"] + weights["block0.attn.bo"]
    np.testing.assert_allclose(attn, expected, atol=1e-12)


def test_local_attention_rejects_bad_neighbors():
    config = _tiny_config()
    weights = init_weights(config, seed=9)
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    features = tape.constant(np.zeros((4, config.feature_dim)))
    with pytest.raises(IndexError):
        local_attention_layer(features, np.array([[0, 7]] * 4), params, "block0", config)


# --- cascaded scale aggregation -------------------------------------------------


def test_csa_shape_contract_same_scale():
    rng = np.random.default_rng(7)
    config = _tiny_config(variant="csa")
    weights = init_weights(config, seed=10)
    features = rng.normal(size=(6, config.feature_dim))
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    out = csa_layer(tape.constant(features), tape.constant(features), params, "block0.csa")
    assert out.values.shape == (6, config.feature_dim)


def test_csa_pooled_summary_permutation_invariant():
    rng = np.random.default_rng(8)
    config = _tiny_config(variant="csa")
    weights = init_weights(config, seed=11)
    weights["block0.csa.psi.b1"] += 0.1
    large = rng.normal(size=(10, config.feature_dim))
    small = rng.normal(size=(4, config.feature_dim))
    perm = rng.permutation(10)

    def run(lg):
        tape = Tape()
        params = build_param_tensors(tape, weights, requires_grad=False)
        return csa_layer(
            tape.constant(lg), tape.constant(small), params, "block0.csa"
        ).values

    np.testing.assert_array_equal(run(large), run(large[perm]))


def test_csa_depends_on_small_scale_identity():
    rng = np.random.default_rng(9)
    config = _tiny_config(variant="csa")
    weights = init_weights(config, seed=12)
    large = rng.normal(size=(8, config.feature_dim))
    small = rng.normal(size=(8, config.feature_dim))

    def run(sm):
        tape = Tape()
        params = build_param_tensors(tape, weights, requires_grad=False)
        return csa_layer(tape.constant(large), tape.constant(sm), params, "block0.csa").values

    assert not np.allclose(run(small), run(np.zeros_like(small)))


def test_csa_subset_validation():
    rng = np.random.default_rng(10)
    config = _tiny_config(variant="csa")
    weights = init_weights(config, seed=13)
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    large = tape.constant(rng.normal(size=(4, config.feature_dim)))
    small = tape.constant(rng.normal(size=(6, config.feature_dim)))
    with pytest.raises(ValueError):
        csa_layer(large, small, params, "block0.csa")  # small exceeds large
    with pytest.raises(ValueError):
        csa_layer(
            small, large, params, "block0.csa", subset_idx=np.array([0, 1, 9, 2])
        )  # index 9 outside the large set


# --- end-to-end forward -----------------------------------------------------------


@pytest.mark.parametrize("variant", ["full", "no_transformer", "no_graph_conv", "local_attention", "csa"])
def test_forward_outputs_unit_rows(variant):
    rng = np.random.default_rng(11)
    config = _tiny_config(variant=variant)
    weights = init_weights(config, seed=14)
    patch = _patch(rng, k=12)
    out = forward(patch, weights, config)
    assert out.shape == (12, 3)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.ones(12), atol=1e-9)


@pytest.mark.parametrize("variant", ["full", "no_transformer", "no_graph_conv"])
def test_forward_permutation_equivariance(variant):
    rng = np.random.default_rng(12)
    config = _tiny_config(variant=variant)
    weights = init_weights(config, seed=15)
    patch = _patch(rng, k=14)
    perm = rng.permutation(14)
    permuted = NormalizedPatch(patch.positions[perm], patch.transform)
    base = forward(patch, weights, config)
    swapped = forward(permuted, weights, config)  # neighbor lists rebuilt inside
    np.testing.assert_allclose(swapped, base[perm], atol=1e-9)


def test_variants_differ():
    rng = np.random.default_rng(13)
    patch = _patch(rng, k=10)
    outs = {}
    for variant in ("full", "no_transformer", "no_graph_conv"):
        config = _tiny_config(variant=variant)
        outs[variant] = forward(patch, init_weights(config, seed=16), config)
    assert not np.allclose(outs["full"], outs["no_transformer"])
    assert not np.allclose(outs["full"], outs["no_graph_conv"])


def test_forward_rejects_small_patches():
    rng = np.random.default_rng(14)
    config = _tiny_config(graph_k=8)
    weights = init_weights(config, seed=17)
    with pytest.raises(ValueError):
        forward(_patch(rng, k=5), weights, config)


def test_forward_batch_matches_single(tmp_path):
    rng = np.random.default_rng(15)
    config = _tiny_config()
    weights = init_weights(config, seed=18)
    patches = [_patch(rng, k=9) for _ in range(3)]
    singles = [forward(p, weights, config) for p in patches]

    positions = np.stack([p.positions for p in patches])
    nb = np.stack([build_neighbor_lists(p.positions, config.graph_k) for p in patches])
    tape = Tape()
    params = build_param_tensors(tape, weights, requires_grad=False)
    batched = forward_batch(
        tape, params, tape.constant(positions), nb, None, config
    ).values
    for i in range(3):
        np.testing.assert_allclose(batched[i], singles[i], atol=1e-12)


def test_full_model_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    config = _tiny_config(variant="full", num_blocks=1)
    patch = _patch(rng, k=8)
    gt = rng.normal(size=(8, 3))
    gt /= np.linalg.norm(gt, axis=1, keepdims=True)
    nb = build_neighbor_lists(patch.positions, config.graph_k)[None]
    weights = init_weights(config, seed=19)
    for name in weights:  # off relu kinks, per the harness smoothness rule
        if name.endswith(".b1"):
            weights[name] = weights[name] + 0.25

    def build(tape, params):
        pred = forward_batch(
            tape, params, tape.constant(patch.positions[None]), nb, None, config
        )
        return sin_loss(ad.reshape(pred, (8, 3)), gt)

    assert finite_difference_check(build, weights) < 1e-4


# --- sin loss -----------------------------------------------------------------------


def _loss_value(pred: np.ndarray, gt: np.ndarray) -> float:
    tape = Tape()
    return float(sin_loss(tape.constant(pred), gt).values)


def test_sin_loss_identities():
    rng = np.random.default_rng(17)
    n = rng.normal(size=(5, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert _loss_value(n, n) == pytest.approx(0.0, abs=1e-15)
    assert _loss_value(-n, n) == pytest.approx(0.0, abs=1e-15)
    x = np.tile([1.0, 0.0, 0.0], (4, 1))
    y = np.tile([0.0, 1.0, 0.0], (4, 1))
    assert _loss_value(x, y) == pytest.approx(1.0, abs=1e-15)
    diag = np.tile([1.0, 1.0, 0.0] / np.sqrt(2.0), (4, 1))
    assert _loss_value(x, diag) == pytest.approx(math.sqrt(2.0) / 2.0, abs=1e-12)


def test_sin_loss_sign_flip_exact():
    rng = np.random.default_rng(18)
    a = rng.normal(size=(6, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b = rng.normal(size=(6, 3))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    base = _loss_value(a, b)
    assert _loss_value(a, -b) == base
    assert _loss_value(-a, b) == base
    flips = np.where(rng.random(6) < 0.5, -1.0, 1.0)[:, None]
    assert _loss_value(a * flips, b) == base


def test_sin_loss_shape_mismatch():
    tape = Tape()
    with pytest.raises(ValueError):
        sin_loss(tape.constant(np.zeros((4, 3))), np.zeros((5, 3)))
