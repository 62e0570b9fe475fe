import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mefusion.core import DimensionError, Tensor, UsageError, count_macs, default_dtype, no_grad
from mefusion.core import functional as F
from mefusion.core.gradcheck import check_gradients
from mefusion.fusion import (
    AttnBlock,
    FuseAfterAttention,
    FuseBeforeAttention,
    FusionConfig,
    GlobalModule,
    MultiHeadAttention,
    PatchEmbed,
    TransformerFusion,
    classify,
    flop_count,
)


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def small_config(**kw):
    base = dict(embed_dim=8, heads=2, attn_depth=1, mlp_ratio=2.0, patch_size=2, region_size=4, in_channels=2)
    base.update(kw)
    return FusionConfig(**base)


def linear_np(lin, x):
    return x @ lin.weight.data + lin.bias.data


# ------------------------------------------------------------ config
def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        FusionConfig(embed_dim=10, heads=3)


@pytest.mark.parametrize("heads", [1, 2, 4, 8])
def test_fused_vector_has_length_c(heads):
    with default_dtype(np.float64):
        layer = FuseBeforeAttention(16, heads, 5, np.random.default_rng(0))
        out = layer(Tensor(np.random.default_rng(1).standard_normal((3, 5, 16))))
    assert out.shape == (3, 16)


def test_published_defaults():
    cfg = FusionConfig()
    assert (cfg.embed_dim, cfg.heads, cfg.head_dim, cfg.patch_size, cfg.region_size) == (256, 8, 32, 18, 90)
    assert cfg.num_patches == 25


# ------------------------------------------------------------ patch embedding
def test_patch_embed_default_token_count():
    cfg = FusionConfig()
    embed = PatchEmbed(cfg.patch_dim, cfg.embed_dim, cfg.num_patches, np.random.default_rng(0))
    out = embed(Tensor(np.zeros((1, 25, 4, 18, 18))))
    assert out.shape == (1, 25, 256)


def test_patch_embed_zero_and_one_hot():
    with default_dtype(np.float64):
        embed = PatchEmbed(6, 4, 3, np.random.default_rng(0))
        zero = embed(Tensor(np.zeros((1, 3, 6)))).data[0]
        np.testing.assert_allclose(zero, embed.proj.bias.data + embed.pos.data, atol=1e-12)
        patches = np.zeros((1, 3, 6))
        patches[0, 1, 4] = 1.0
        out = embed(Tensor(patches)).data[0, 1]
    np.testing.assert_allclose(out, embed.proj.weight.data[4] + embed.proj.bias.data + embed.pos.data[1], atol=1e-12)


def test_patch_embed_shape_errors():
    embed = PatchEmbed(6, 4, 3, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        embed(Tensor(np.zeros((1, 3, 5))))
    with pytest.raises(DimensionError):
        embed(Tensor(np.zeros((1, 2, 6))))


# ------------------------------------------------------------ attention block
def test_single_token_attention_weight_is_one():
    with default_dtype(np.float64):
        block = AttnBlock(8, 2, 1, 2.0, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 1, 8))
        out = block(Tensor(x)).data
        layer = block.layers[0]
        np.testing.assert_array_equal(layer.attn.last_weights, np.ones((2, 2, 1, 1)))
        # one token: attention returns proj(v(LN(x)))
        ln = F.layer_norm(Tensor(x), layer.norm1.gamma, layer.norm1.beta).data
        v = linear_np(layer.attn.qkv, ln)[..., 16:]
        mid = x + linear_np(layer.attn.proj, v)
        expected = mid + layer.mlp(layer.norm2(Tensor(mid))).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_two_token_attention_matches_hand_computation():
    with default_dtype(np.float64):
        mha = MultiHeadAttention(2, 1, np.random.default_rng(3))
        x = np.array([[[0.5, -1.0], [2.0, 0.3]]])
        out = mha(Tensor(x)).data[0]
    w, b = mha.qkv.weight.data, mha.qkv.bias.data
    expected = []
    for i in range(2):
        q = x[0, i] @ w[:, 0:2] + b[0:2]
        scores = np.array([q @ (x[0, j] @ w[:, 2:4] + b[2:4]) / np.sqrt(2) for j in range(2)])
        p = softmax(scores)
        v = sum(p[j] * (x[0, j] @ w[:, 4:6] + b[4:6]) for j in range(2))
        expected.append(v @ mha.proj.weight.data + mha.proj.bias.data)
    np.testing.assert_allclose(out, np.array(expected), atol=1e-12)


def test_attention_is_permutation_equivariant_without_positions():
    rng = np.random.default_rng(0)
    with default_dtype(np.float64):
        block = AttnBlock(8, 2, 2, 2.0, rng)
        x = rng.standard_normal((2, 6, 8))
        perm = rng.permutation(6)
        np.testing.assert_allclose(block(Tensor(x[:, perm])).data, block(Tensor(x)).data[:, perm], atol=1e-10)


def test_attention_block_rejects_empty_sequence():
    block = AttnBlock(8, 2, 1, 2.0, np.random.default_rng(0))
    with pytest.raises(UsageError):
        block(Tensor(np.zeros((1, 0, 8))))


# ------------------------------------------------------------ fusion before attention
def test_equal_lin_weights_give_mean_query():
    with default_dtype(np.float64):
        layer = FuseBeforeAttention(8, 2, 5, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 5, 8))
        mixed = layer.mixed_query(Tensor(x)).data
    q = linear_np(layer.q, x).reshape(3, 5, 2, 4).mean(axis=1)
    np.testing.assert_allclose(mixed, q, atol=1e-12)


def test_before_singleton_returns_value_row():
    with default_dtype(np.float64):
        layer = FuseBeforeAttention(8, 2, 1, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((4, 1, 8))
        out = layer(Tensor(x)).data
    np.testing.assert_array_equal(layer.last_weights, np.ones((4, 2, 1)))
    np.testing.assert_allclose(out, linear_np(layer.v, x[:, 0]), atol=1e-12)


def test_before_two_tokens_matches_hand_computation():
    with default_dtype(np.float64):
        layer = FuseBeforeAttention(2, 1, 2, np.random.default_rng(7))
        layer.lin.data[:] = [[0.3, 0.7]]
        layer.eval()  # running mean 0, running var 1
        x = np.array([[[1.0, -0.5], [0.2, 0.8]]])
        out = layer(Tensor(x)).data[0]
    q = [linear_np(layer.q, x[0, j]) for j in range(2)]
    k = [linear_np(layer.k, x[0, j]) for j in range(2)]
    v = [linear_np(layer.v, x[0, j]) for j in range(2)]
    query = 0.3 * q[0] + 0.7 * q[1]
    raw = np.array([query @ k[0], query @ k[1]]) / np.sqrt(1 + 1e-5)
    p = softmax(raw)
    np.testing.assert_allclose(out, p[0] * v[0] + p[1] * v[1], atol=1e-12)


def test_constant_sequence_gives_uniform_weights():
    with default_dtype(np.float64):
        glob = GlobalModule(small_config(), 9, np.random.default_rng(0))
        glob.positional = False
        vec = np.random.default_rng(1).standard_normal(8)
        glob(Tensor(np.tile(vec, (1, 9, 1))))
    np.testing.assert_allclose(glob.fusion.fuse.last_weights, np.full((1, 2, 9), 1 / 9), atol=1e-12)


def test_global_module_rejects_wrong_count():
    glob = GlobalModule(small_config(), 9, np.random.default_rng(0))
    with pytest.raises(UsageError):
        glob(Tensor(np.zeros((1, 8, 8))))


def test_fusion_layer_errors():
    layer = FuseBeforeAttention(8, 2, 3, np.random.default_rng(0))
    with pytest.raises(UsageError):
        layer(Tensor(np.zeros((1, 0, 8))))
    with pytest.raises(DimensionError):
        layer(Tensor(np.zeros((1, 4, 8))))


@pytest.mark.parametrize("layer_cls", [FuseBeforeAttention, FuseAfterAttention])
def test_fusion_weights_are_probability_vectors(layer_cls):
    rng = np.random.default_rng(0)
    layer = layer_cls(8, 2, 6, rng)
    for trial in range(250):
        layer.train(trial % 2 == 0)
        scale = 10.0 ** rng.uniform(-3, 3)
        layer(Tensor((scale * rng.standard_normal((4, 6, 8))).astype(np.float32)))
        w = layer.last_weights.astype(np.float64)
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_before_weights_sum_to_one_property(tokens, batch, seed):
    rng = np.random.default_rng(seed)
    layer = FuseBeforeAttention(4, 2, tokens, rng)
    layer(Tensor(rng.standard_normal((batch, tokens, 4)).astype(np.float32)))
    np.testing.assert_allclose(layer.last_weights.sum(axis=-1), 1.0, atol=1e-6)


# ------------------------------------------------------------ fusion after attention
def test_after_singleton_returns_value_row():
    with default_dtype(np.float64):
        layer = FuseAfterAttention(8, 2, 1, np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((3, 1, 8))
        out = layer(Tensor(x)).data
    np.testing.assert_allclose(out, linear_np(layer.v, x[:, 0]), atol=1e-12)


def test_after_matches_brute_force():
    with default_dtype(np.float64):
        layer = FuseAfterAttention(4, 2, 3, np.random.default_rng(2))
        layer.merge.data[:] = [[0.2, 0.5, 0.3]]
        x = np.random.default_rng(3).standard_normal((1, 3, 4))
        out = layer(Tensor(x)).data[0]
    q, k, v = (linear_np(m, x[0]) for m in (layer.q, layer.k, layer.v))
    attended = np.zeros((3, 4))
    for h in range(2):
        cols = slice(2 * h, 2 * h + 2)
        for i in range(3):
            p = softmax(np.array([q[i, cols] @ k[j, cols] for j in range(3)]) / np.sqrt(2))
            attended[i, cols] = sum(p[j] * v[j, cols] for j in range(3))
    np.testing.assert_allclose(out, 0.2 * attended[0] + 0.5 * attended[1] + 0.3 * attended[2], atol=1e-12)


def test_after_equal_weights_average_attention_outputs():
    with default_dtype(np.float64):
        layer = FuseAfterAttention(4, 2, 3, np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal((2, 3, 4))
        out = layer(Tensor(x)).data
        q, k, v = layer.project(Tensor(x))
        w = F.softmax(q @ k.transpose(0, 1, 3, 2) * (1 / np.sqrt(2)), axis=-1)
        attended = (w @ v).data.transpose(0, 2, 1, 3).reshape(2, 3, 4)
    np.testing.assert_allclose(out, attended.mean(axis=1), atol=1e-12)


# ------------------------------------------------------------ computation count
@pytest.mark.parametrize("n", [2, 9, 25])
def test_before_needs_fewer_operations(n):
    before = flop_count(256, 8, n, "before")
    after = flop_count(256, 8, n, "after")
    assert before["scores"] < after["scores"]
    assert before["total"] < after["total"]


def test_singleton_score_cost_is_equal():
    assert flop_count(256, 8, 1, "before")["scores"] == flop_count(256, 8, 1, "after")["scores"]


@pytest.mark.parametrize("variant,layer_cls", [("before", FuseBeforeAttention), ("after", FuseAfterAttention)])
@pytest.mark.parametrize("n", [1, 2, 9])
def test_flop_count_matches_instrumented_execution(variant, layer_cls, n):
    layer = layer_cls(16, 4, n, np.random.default_rng(0))
    with no_grad(), count_macs() as counter:
        layer(Tensor(np.random.default_rng(1).standard_normal((1, n, 16)).astype(np.float32)))
    assert counter.total == flop_count(16, 4, n, variant)["total"]


def test_flop_count_rejects_unknown_variant():
    with pytest.raises(ValueError):
        flop_count(16, 4, 2, "sideways")


# ------------------------------------------------------------ gradients
def _attn_case(x):
    block = AttnBlock(4, 2, 1, 2.0, np.random.default_rng(0))
    return block(x)


def _before_case(x, lin):
    layer = FuseBeforeAttention(4, 2, 3, np.random.default_rng(0))
    layer.lin = lin
    return layer(x)


def _after_case(x, merge):
    layer = FuseAfterAttention(4, 2, 3, np.random.default_rng(0))
    layer.merge = merge
    return layer(x)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
@pytest.mark.parametrize("case", ["attn", "before", "after"])
def test_fusion_gradients(case, dtype, tol):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 3, 4))
    if case == "attn":
        fn, inputs = _attn_case, [x]
    elif case == "before":
        fn, inputs = _before_case, [x, rng.uniform(0.1, 0.6, (2, 3))]
    else:
        fn, inputs = _after_case, [x, rng.uniform(0.1, 0.6, (1, 3))]
    assert check_gradients(fn, inputs, dtype=dtype, rng=rng) <= tol


# ------------------------------------------------------------ full classifier
@pytest.fixture(scope="module")
def tiny_model():
    return TransformerFusion(small_config(), np.random.default_rng(0))


def _patches(batch=3, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((batch, 10, 4, 2, 2, 2)).astype(np.float32))


def test_local_modules_have_disjoint_parameters(tiny_model):
    seen = set()
    for module in tiny_model.locals + [tiny_model.face, tiny_model.global_module]:
        ids = {id(p) for p in module.parameters()}
        assert not ids & seen
        seen |= ids
    assert len(tiny_model.locals) == 9


@pytest.mark.parametrize("variant", ["before", "after"])
def test_classification_gradient_reaches_every_module(variant):
    model = TransformerFusion(small_config(fusion_variant=variant), np.random.default_rng(0))
    F.cross_entropy(model(_patches()), [0, 1, 2]).backward()
    modules = model.locals + [model.face, model.global_module]
    # a per-head BN shift moves every logit of that head equally, so the softmax cancels it
    shift_free = {id(m.fusion.fuse.bn.beta) for m in modules if variant == "before"}
    for module in modules:
        for p in module.parameters():
            assert p.grad is not None
            if id(p) not in shift_free:
                assert np.abs(p.grad).max() > 0


@pytest.mark.parametrize("kw,width", [({}, 16), ({"use_fullface": False}, 8)])
def test_ablation_switches_change_structure(kw, width):
    model = TransformerFusion(small_config(), np.random.default_rng(0), **kw)
    assert model.fc1.weight.shape[0] == width
    assert model(_patches()).shape == (3, 3)


def test_switches_remove_modules():
    model = TransformerFusion(small_config(), np.random.default_rng(0), use_local=False, use_global=False)
    assert model.global_module is None
    assert all(m.fusion is None for m in model.locals)
    assert model(_patches()).shape == (3, 3)


def test_wrong_region_count_rejected(tiny_model):
    with pytest.raises(DimensionError):
        tiny_model(Tensor(np.zeros((1, 9, 4, 2, 2, 2), dtype=np.float32)))


def test_fusion_weights_exposed(tiny_model):
    tiny_model(_patches())
    weights = tiny_model.fusion_weights()
    assert set(weights) == {f"local{i}" for i in range(9)} | {"global", "fullface"}
    assert np.allclose(np.sum(weights["global"], axis=-1), 1.0, atol=1e-5)


def test_classify_ties_and_confidence():
    res = classify(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]))
    np.testing.assert_allclose(res.probabilities[0], 1 / 3)
    assert res.labels.tolist() == [0, 0]
    assert res.probabilities[1, 0] > 0.9999


def test_uniform_cross_entropy_is_ln3():
    with default_dtype(np.float64):
        assert F.cross_entropy(Tensor(np.zeros((4, 3))), [0, 1, 2, 1]).item() == pytest.approx(np.log(3), abs=1e-12)
