import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgsyolo import ops
from dgsyolo.blocks import (
    SPP,
    AttentionPath,
    ConvBNAct,
    DetectHead,
    DgsmBlock,
    DgsmConfig,
    DgsmStage,
    DgstBlock,
    DgstConfig,
    MultiHeadSelfAttention,
    attend,
    auto_heads,
    fold_batchnorm,
    sincos_2d,
)
from dgsyolo.gradcheck import BLOCK_CASES, BLOCK_TOLERANCE, run_block_check
from dgsyolo.tensor import ShapeError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float32))


def test_cbl_param_count_and_zero_output():
    m = ConvBNAct(3, 32, 3, rng=rng())
    assert m.analytic_params() == m.enumerated_params() == 992
    m.conv.weight.data[:] = 0
    y = m(T(rng().standard_normal((1, 3, 8, 8))))
    assert not y.data.any()


def test_cbl_equals_manual_composition():
    m = ConvBNAct(4, 6, 3, 2, groups=2, rng=rng(1))
    m.bn.running_mean.data = rng(2).standard_normal(6).astype(np.float32)
    m.bn.gamma.data = rng(3).uniform(0.5, 2, 6).astype(np.float32)
    x = T(rng(4).standard_normal((2, 4, 7, 7)))
    conv = ops.conv2d(x, m.conv.weight, None, 2, 2)
    bn, _, _ = ops.batchnorm(conv, m.bn.gamma, m.bn.beta, m.bn.running_mean.data, m.bn.running_var.data)
    assert np.array_equal(m(x).data, ops.leaky_relu(bn).data)


# ---------------------------------------------------------------------------
# DGSM


def _identity_init(block):
    for _, child in block.children():
        w = child.conv.weight.data
        w[:] = 0
        oc, cpg = w.shape[:2]
        for o in range(oc):
            w[o, o % cpg, w.shape[2] // 2, w.shape[3] // 2] = 1
        child.bn.running_var.data[:] = np.float32(1) - np.float32(ops.BN_EPS)


def test_dgsm_identity_init_is_channel_permutation():
    block = DgsmBlock(8, DgsmConfig(8, 1, downsample=False), 1, rng())
    _identity_init(block)
    x = rng(1).uniform(0.1, 1, (1, 8, 5, 5)).astype(np.float32)  # positive: leaky ReLU is identity
    perm = ops.shuffle_permutation(8, 2)
    np.testing.assert_allclose(block(T(x)).data, x[:, perm], rtol=1e-6)


def test_dgsm_shapes_and_param_count():
    block = DgsmBlock(64, DgsmConfig(64, 1, downsample=False), 1, rng())
    x = T(rng().standard_normal((1, 64, 8, 8)))
    assert block(x).shape == (1, 64, 8, 8)
    assert block.analytic_params() == block.enumerated_params()
    down = DgsmBlock(32, DgsmConfig(64), 2, rng())
    assert down(T(np.zeros((1, 32, 8, 8)))).shape == (1, 64, 4, 4)
    assert down.analytic_params() == down.enumerated_params()


@pytest.mark.parametrize("n,c", [(2, 64), (3, 128), (4, 256), (2, 512)])
def test_dgsm_stage_rows(n, c):
    stage = DgsmStage(c // 2, DgsmConfig(c, n), rng())
    assert len(list(stage.children())) == n
    assert stage(T(np.zeros((1, c // 2, 8, 8)))).shape == (1, c, 4, 4)


def test_dgsm_single_block_stage():
    stage = DgsmStage(16, DgsmConfig(32, 1), rng())
    assert [name for name, _ in stage.children()] == ["block0"] and stage.block0.stride == 2


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 2), c=st.sampled_from([8, 16, 24, 32]), h=st.integers(1, 9), w=st.integers(1, 9))
def test_dgsm_stride1_shape_preserving(n, c, h, w):
    block = DgsmBlock(c, DgsmConfig(c, downsample=False), 1, rng())
    assert block(T(rng().standard_normal((n, c, h, w)))).shape == (n, c, h, w)


def test_dgsm_config_errors():
    with pytest.raises(ShapeError):
        DgsmConfig(6)
    with pytest.raises(ShapeError):
        DgsmConfig(8, 0)
    with pytest.raises(ShapeError):
        DgsmBlock(16, DgsmConfig(8, downsample=False), 1, rng())


# ---------------------------------------------------------------------------
# DGST


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 2), c=st.sampled_from([8, 16, 32, 64]), h=st.integers(1, 6), w=st.integers(1, 6))
def test_dgst_shape_preserving(n, c, h, w):
    block = DgstBlock(DgstConfig(c), rng())
    assert block(T(rng().standard_normal((n, c, h, w)))).shape == (n, c, h, w)


def test_dgst_split_and_param_count():
    cfg = DgstConfig(256)
    assert (cfg.conv_channels, cfg.attn_channels, cfg.n_heads) == (192, 64, 2)
    block = DgstBlock(cfg, rng())
    assert block.analytic_params() == block.enumerated_params()
    assert auto_heads(128) == 4 and auto_heads(16) == 1 and auto_heads(8) == 1


def test_dgst_errors():
    with pytest.raises(ShapeError):
        DgstConfig(10)
    with pytest.raises(ShapeError):
        DgstConfig(16, heads=3)
    with pytest.raises(ShapeError):
        DgstBlock(DgstConfig(16), rng())(T(np.zeros((1, 8, 2, 2))))


def test_fresh_dgst_block_passes_only_the_encoded_attention_input():
    cfg = DgstConfig(32)
    x = rng(9).standard_normal((1, 32, 3, 4))
    y = DgstBlock(cfg, rng()).astype(np.float64)(Tensor(x, dtype=np.float64)).data
    attn = x[:, 24:] + sincos_2d(8, 3, 4)[None]
    merged = np.concatenate([np.zeros((1, 24, 3, 4)), attn], axis=1)[:, ops.shuffle_permutation(32, 4)]
    np.testing.assert_allclose(y, x + merged, rtol=1e-12, atol=1e-12)


def test_shuffle4_puts_one_attention_channel_in_every_quad():
    for c in (8, 16, 64, 256):
        src = ops.shuffle_permutation(c, 4)
        is_attn = src >= 3 * c // 4
        assert (is_attn.reshape(-1, 4).sum(axis=1) == 1).all()


def test_attention_uniform_when_queries_and_keys_equal():
    r = rng(5)
    q = T(np.ones((1, 8, 3, 3)))
    v = T(r.standard_normal((1, 8, 3, 3)))
    out, weights = attend(q, q, v, heads=2)
    np.testing.assert_allclose(weights.data, 1 / 9, rtol=1e-6)
    mean = v.data.reshape(1, 8, 9).mean(axis=2, keepdims=True)
    np.testing.assert_allclose(out.data.reshape(1, 8, 9), np.broadcast_to(mean, (1, 8, 9)), atol=1e-6)


def test_attention_rows_sum_to_one():
    mhsa = MultiHeadSelfAttention(16, 2, rng(6))
    _, weights = mhsa(T(rng(7).standard_normal((2, 16, 4, 5))), return_weights=True)
    assert weights.shape == (2, 2, 20, 20)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1, atol=1e-6)


def _permute_positions(a, perm):
    n, c, h, w = a.shape
    return a.reshape(n, c, h * w)[:, :, perm].reshape(n, c, h, w)


@pytest.mark.parametrize("seed", range(5))
def test_attention_equivariance_depends_on_positional_encoding(seed):
    r = rng(seed)
    x = r.standard_normal((1, 8, 3, 4)).astype(np.float32)
    perm = r.permutation(12)
    plain = AttentionPath(8, 1, 2, pos_encoding=False, rng=rng(seed))
    got = plain(T(_permute_positions(x, perm))).data
    np.testing.assert_allclose(got, _permute_positions(plain(T(x)).data, perm), atol=1e-5)

    encoded = AttentionPath(8, 1, 2, pos_encoding=True, rng=rng(seed))
    got = encoded(T(_permute_positions(x, perm))).data
    assert not np.allclose(got, _permute_positions(encoded(T(x)).data, perm), atol=1e-3)


# ---------------------------------------------------------------------------
# SPP and head


def naive_pool(x, k):
    n, c, h, w = x.shape
    p = k // 2
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            out[:, :, i, j] = x[:, :, max(i - p, 0) : i + p + 1, max(j - p, 0) : j + p + 1].max(axis=(2, 3))
    return out


def test_spp_matches_naive_pooling():
    spp = SPP(4, rng=rng())
    x = rng(8).standard_normal((1, 4, 9, 7)).astype(np.float32)
    stacked = np.concatenate([x] + [naive_pool(x, k) for k in (5, 9, 13)], axis=1)
    assert spp(T(x)).shape == x.shape
    np.testing.assert_array_equal(spp(T(x)).data, spp.proj(T(stacked)).data)


def test_spp_constant_input():
    spp = SPP(4, groups=2, rng=rng())
    x = np.full((1, 4, 6, 6), 0.7, dtype=np.float32)
    np.testing.assert_array_equal(spp(T(x)).data, spp.proj(T(np.full((1, 16, 6, 6), 0.7))).data)
    assert spp.analytic_params() == spp.enumerated_params()


def _randomize(module, seed):
    r = rng(seed)
    for name, t in module.named_tensors():
        noise = r.uniform(0.5, 1.5, t.shape) if name.endswith(("gamma", "running_var")) else r.standard_normal(t.shape)
        t.data = noise.astype(t.data.dtype)
    return module


@pytest.mark.parametrize(
    "make,shape",
    [
        (lambda: ConvBNAct(8, 16, 3, 2, groups=2, shuffle=True, rng=rng()), (2, 8, 9, 7)),
        (lambda: DgsmBlock(16, DgsmConfig(32), 2, rng()), (1, 16, 8, 8)),
        (lambda: DgstBlock(DgstConfig(32), rng()), (1, 32, 4, 5)),
        (lambda: SPP(8, groups=2, rng=rng()), (1, 8, 6, 6)),
    ],
)
def test_folded_batchnorm_matches_eval_forward(make, shape):
    module = _randomize(make(), 4).astype(np.float64).eval()
    x = Tensor(rng(5).standard_normal(shape), dtype=np.float64)
    folded = fold_batchnorm(module)
    assert not any(name.endswith("running_mean") for name, _ in folded.named_tensors())
    np.testing.assert_allclose(folded(x).data, module(x).data, rtol=1e-10, atol=1e-10)
    # the source module is left untouched
    assert any(name.endswith("running_mean") for name, _ in module.named_tensors())


def test_detect_head_prior_init():
    head = DetectHead(64, 3, 2, rng(), stride=16)
    assert not head.conv.weight.data.any()
    bias = head.conv.bias.data.reshape(3, 7)
    np.testing.assert_allclose(bias[:, 4], np.log(8 / 40**2), rtol=1e-6)
    np.testing.assert_allclose(bias[:, 5:], np.log(0.6 / 1.01), rtol=1e-6)
    np.testing.assert_allclose(bias[:, :4], 0)


def test_detect_head():
    head = DetectHead(256, 3, 2, rng())
    assert head.analytic_params() == head.enumerated_params() == 5397
    head.conv.weight.data[:] = 0
    y = head(T(rng().standard_normal((1, 256, 4, 4))))
    assert y.shape == (1, 21, 4, 4) and not y.data.any()
    assert (ops.sigmoid(y).data == 0.5).all()


# ---------------------------------------------------------------------------
# gradients (the 20-seed sweep lives in the acceptance suite)


@pytest.mark.parametrize("name", BLOCK_CASES)
def test_block_gradients(name):
    for seed in range(3):
        res = run_block_check(name, seed)
        assert res.passed(BLOCK_TOLERANCE), f"{name} seed {seed}: {res}"
