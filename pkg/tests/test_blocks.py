import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_loop, conv2d_loop, gelu_scalar
from pyramid_transformer import ops
from pyramid_transformer.blocks import (
    NormalBlockParams,
    PCMParams,
    PRMParams,
    PyramidBlockParams,
    StageConfig,
    normal_block,
    pcm,
    prm,
    pyramid_block,
)
from pyramid_transformer.gradcheck import grad_check
from pyramid_transformer.tensor import Tensor
from pyramid_transformer.transformer import TokenSequence

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def randomize(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def zero_transformer_weights(params):
    for mod in (params.attn, params.ffn):
        for _, p in mod.named_parameters():
            p.data[:] = 0.0


def ln_np(v, g, b, eps=1e-6):
    mu = v.mean(-1, keepdims=True)
    return (v - mu) / np.sqrt(v.var(-1, keepdims=True) + eps) * g + b


def bn_train_np(x, g, b, eps=1e-5):
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g.reshape(1, -1, 1, 1) + b.reshape(1, -1, 1, 1)


def ffn_np(x, p):
    hidden = np.vectorize(gelu_scalar)(x @ p.fc1.weight.data + p.fc1.bias.data)
    return hidden @ p.fc2.weight.data + p.fc2.bias.data


def attn_np(x, p, heads):
    args = [a for lin in (p.q, p.k, p.v, p.o) for a in (lin.weight.data, lin.bias.data)]
    return attention_loop(x, *args, heads)


def pcm_np(h, params, strides):
    x = h
    for i, (conv, bn, s) in enumerate(zip(params.convs, params.bns, strides)):
        x = bn_train_np(conv2d_loop(x, conv.weight.data, None, s, 1, 1), bn.gamma.data, bn.beta.data)
        if i < 2:
            x = np.vectorize(gelu_scalar)(x)
    return x


def to_seq(f):
    b, d, h, w = f.shape
    return f.reshape(b, d, h * w).transpose(0, 2, 1)


# ------------------------------------------------------------------ config


@pytest.mark.parametrize(
    "kwargs, field",
    [
        (dict(dim_in=4, dim_out=10, dilations=(1, 2, 3)), "branches"),
        (dict(dim_in=4, dim_out=12, num_heads=5), "num_heads"),
        (dict(dim_in=4, dim_out=12, dilations=(0, 1)), "dilations"),
        (dict(dim_in=4, dim_out=12, reduction_ratio=3), "reduction_ratio"),
        (dict(dim_in=4, dim_out=12, nb_depth=-1), "nb_depth"),
    ],
)
def test_stage_config_rejects_with_field_named(kwargs, field):
    with pytest.raises(ValueError, match=field):
        StageConfig(**kwargs)


# ------------------------------------------------------------------ prm


def test_prm_single_branch_identity():
    cfg = StageConfig(3, 3, 1, (1,), 1, prm_kernel=1)
    p = PRMParams(cfg, np.random.default_rng(0), F64)
    p.branches[0].weight.data = np.eye(3).reshape(3, 3, 1, 1)
    x = np.random.default_rng(1).standard_normal((2, 3, 5, 5))
    assert np.array_equal(prm(t64(x), cfg, p).data, x)


def test_prm_channel_bookkeeping():
    cfg = StageConfig(8, 96, 2, (1, 2, 3), 1)
    p = PRMParams(cfg, np.random.default_rng(0), F64)
    assert [b.weight.shape[0] for b in p.branches] == [32, 32, 32]
    assert prm(t64(np.zeros((1, 8, 8, 8))), cfg, p).shape == (1, 96, 4, 4)


@pytest.mark.parametrize("dilations", [(1,), (1, 2), (1, 2, 3, 4)])
@pytest.mark.parametrize("r", [2, 4])
def test_prm_blocks_match_branch_oracle(dilations, r):
    rng = np.random.default_rng(len(dilations) * 10 + r)
    cfg = StageConfig(3, 4 * len(dilations), r, dilations, 1)
    p = randomize(PRMParams(cfg, rng, F64), rng)
    x = rng.standard_normal((2, 3, 16, 16))
    out = prm(t64(x), cfg, p).data
    c = cfg.branch_channels
    for j, (d, br) in enumerate(zip(dilations, p.branches)):
        oracle = conv2d_loop(x, br.weight.data, br.bias.data, r, d, d)
        np.testing.assert_allclose(out[:, j * c : (j + 1) * c], oracle, atol=1e-6, rtol=0)


def test_prm_divisibility_error_names_padding():
    cfg = StageConfig(3, 4, 4, (1, 2), 1)
    p = PRMParams(cfg, np.random.default_rng(0), F64)
    with pytest.raises(ValueError, match=r"pad by \(2, 0\)"):
        prm(t64(np.zeros((1, 3, 10, 8))), cfg, p)


# ------------------------------------------------------------------ pcm


def test_pcm_zero_case():
    cfg = StageConfig(3, 4, 1, (1,), 1)
    p = PCMParams(3, 4, np.random.default_rng(0), F64)
    for conv in p.convs:
        conv.weight.data[:] = 0.0
    out = pcm(t64(np.random.default_rng(1).standard_normal((2, 3, 6, 6))), cfg, p, train=True)
    assert np.all(out.data == 0.0)


@pytest.mark.parametrize("r, hw", [(1, 12), (2, 6), (4, 3)])
def test_pcm_strides(r, hw):
    cfg = StageConfig(3, 4, r, (1,), 1)
    p = PCMParams(3, 4, np.random.default_rng(0), F64)
    assert pcm(t64(np.zeros((1, 3, 12, 12))), cfg, p).shape == (1, 4, hw, hw)


@pytest.mark.parametrize("r", [1, 2, 4])
def test_pcm_matches_composition_oracle(r):
    rng = np.random.default_rng(r)
    cfg = StageConfig(3, 4, r, (1,), 1)
    p = randomize(PCMParams(3, 4, rng, F64), rng)
    x = rng.standard_normal((2, 3, 8, 8))
    strides = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1)}[r]
    np.testing.assert_allclose(pcm(t64(x), cfg, p, train=True).data, pcm_np(x, p, strides), atol=1e-5, rtol=0)


def test_pcm_eval_mode_uses_running_stats():
    rng = np.random.default_rng(3)
    cfg = StageConfig(2, 2, 1, (1,), 1)
    p = randomize(PCMParams(2, 2, rng, F64), rng)
    x = rng.standard_normal((2, 2, 5, 5))
    before = [bn.running_mean.copy() for bn in p.bns]
    pcm(t64(x), cfg, p, train=False)
    assert all(np.array_equal(a, bn.running_mean) for a, bn in zip(before, p.bns))
    pcm(t64(x), cfg, p, train=True)
    assert not np.array_equal(before[0], p.bns[0].running_mean)


# ------------------------------------------------------------------ pyramid block


@settings(max_examples=12, deadline=None)
@given(
    st.sampled_from([2, 4]),
    st.sampled_from([(1,), (1, 2), (1, 2, 3, 4)]),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(0, 2**31),
)
def test_pyramid_block_shape_contract(r, dilations, mh, mw, seed):
    rng = np.random.default_rng(seed)
    cfg = StageConfig(3, 4 * len(dilations), r, dilations, 2, 0, 2.0)
    p = PyramidBlockParams(cfg, rng, F64)
    h, w = 4 * mh * r // 2, 4 * mw * r // 2
    out = pyramid_block(t64(rng.standard_normal((1, 3, h, w))), cfg, p)
    assert out.shape == (1, cfg.dim_out, h // r, w // r)


def test_pyramid_block_zero_branches_leave_pcm():
    rng = np.random.default_rng(4)
    cfg = StageConfig(3, 8, 2, (1, 2), 2, 0, 2.0)
    p = randomize(PyramidBlockParams(cfg, rng, F64), rng)
    zero_transformer_weights(p)
    x = t64(rng.standard_normal((2, 3, 8, 8)))
    out = pyramid_block(x, cfg, p, train=False).data
    assert np.array_equal(out, pcm(x, cfg, p.pcm, train=False).data)


def test_pyramid_block_matches_composition_oracle():
    rng = np.random.default_rng(5)
    cfg = StageConfig(3, 8, 2, (1, 2), 2, 0, 2.0)
    p = randomize(PyramidBlockParams(cfg, rng, F64), rng)
    x = rng.standard_normal((2, 3, 8, 8))
    ms = np.concatenate(
        [conv2d_loop(x, b.weight.data, b.bias.data, 2, d, d) for d, b in zip(cfg.dilations, p.prm.branches)], axis=1
    )
    g = attn_np(ln_np(to_seq(ms), p.ln_attn.gamma.data, p.ln_attn.beta.data), p.attn, 2)
    fused = g + to_seq(pcm_np(x, p.pcm, (2, 1, 1)))
    out = fused + ffn_np(ln_np(fused, p.ln_ffn.gamma.data, p.ln_ffn.beta.data), p.ffn)
    expected = out.transpose(0, 2, 1).reshape(2, 8, 4, 4)
    np.testing.assert_allclose(pyramid_block(t64(x), cfg, p, train=True).data, expected, atol=1e-5, rtol=0)


def test_pyramid_block_grad_check():
    rng = np.random.default_rng(6)
    cfg = StageConfig(2, 4, 2, (1, 2), 2, 0, 2.0)
    p = PyramidBlockParams(cfg, rng, F64)
    x = t64(rng.standard_normal((2, 2, 8, 8)), grad=True)
    w = t64(rng.standard_normal((2, 4, 4, 4)))
    assert grad_check(lambda: (pyramid_block(x, cfg, p, train=True) * w).sum(), x, max_coords=40, rng=rng) < 1e-4


@pytest.mark.parametrize("train", [True, False])
def test_pyramid_block_no_dead_parameters(train):
    rng = np.random.default_rng(7)
    cfg = StageConfig(3, 8, 4, (1, 2), 2, 0, 2.0)
    p = randomize(PyramidBlockParams(cfg, rng, F64), rng)
    x = t64(rng.standard_normal((2, 3, 16, 16)))
    w = rng.standard_normal((2, 8, 4, 4))
    (pyramid_block(x, cfg, p, train=train) * t64(w)).sum().backward()
    for name, prm_ in p.named_parameters():
        assert prm_.grad is not None and np.any(prm_.grad != 0), name


# ------------------------------------------------------------------ normal block


def _nb_setup(seed, with_cls=True):
    rng = np.random.default_rng(seed)
    cfg = StageConfig(8, 8, 2, (1, 2), 2, 1, 2.0)
    p = randomize(NormalBlockParams(cfg, rng, F64), rng)
    x = rng.standard_normal((2, 16 + with_cls, 8))
    return rng, cfg, p, TokenSequence(t64(x), with_cls, (4, 4))


def test_normal_block_residual_only_identity():
    _, cfg, p, seq = _nb_setup(8)
    zero_transformer_weights(p)
    for conv in p.local.convs:
        conv.weight.data[:] = 0.0
    for bn in p.local.bns:
        bn.beta.data[:] = 0.0
    out = normal_block(seq, cfg, p, train=True)
    assert np.array_equal(out.tokens.data, seq.tokens.data)


def test_normal_block_class_token_bypasses_local_branch():
    _, cfg, p, seq = _nb_setup(9)
    zero_transformer_weights(p)
    out = normal_block(seq, cfg, p, train=True).tokens.data
    assert np.array_equal(out[:, -1], seq.tokens.data[:, -1])
    assert not np.allclose(out[:, :-1], seq.tokens.data[:, :-1])


@pytest.mark.parametrize("with_cls", [True, False])
def test_normal_block_shape_preserved(with_cls):
    _, cfg, p, seq = _nb_setup(10, with_cls)
    out = normal_block(seq, cfg, p)
    assert out.tokens.shape == seq.tokens.shape
    assert out.has_class_token == with_cls and out.spatial_hw == (4, 4)


def test_normal_block_matches_composition_oracle():
    _, cfg, p, seq = _nb_setup(11)
    x = seq.tokens.data
    g = attn_np(ln_np(x, p.ln_attn.gamma.data, p.ln_attn.beta.data), p.attn, 2)
    spatial = x[:, :-1].transpose(0, 2, 1).reshape(2, 8, 4, 4)
    local = np.concatenate([to_seq(pcm_np(spatial, p.local, (1, 1, 1))), np.zeros((2, 1, 8))], axis=1)
    fused = x + g + local
    expected = fused + ffn_np(ln_np(fused, p.ln_ffn.gamma.data, p.ln_ffn.beta.data), p.ffn)
    np.testing.assert_allclose(normal_block(seq, cfg, p, train=True).tokens.data, expected, atol=1e-5, rtol=0)


def test_normal_block_needs_spatial_hw():
    _, cfg, p, seq = _nb_setup(12, False)
    with pytest.raises(ValueError, match="spatial_hw"):
        normal_block(TokenSequence(seq.tokens), cfg, p)


def test_normal_block_grad_check():
    rng, cfg, p, seq = _nb_setup(13)
    x = t64(seq.tokens.data, grad=True)
    w = t64(rng.standard_normal(x.shape))
    f = lambda: (normal_block(TokenSequence(x, True, (4, 4)), cfg, p, train=True).tokens * w).sum()  # noqa: E731
    assert grad_check(f, x, max_coords=40, rng=rng) < 1e-4


def test_normal_block_no_dead_parameters():
    rng, cfg, p, seq = _nb_setup(14)
    w = rng.standard_normal(seq.tokens.shape)
    (normal_block(seq, cfg, p, train=True).tokens * t64(w)).sum().backward()
    for name, prm_ in p.named_parameters():
        assert prm_.grad is not None and np.any(prm_.grad != 0), name


def test_stride_ladder_from_ratios():
    stride = 1
    strides = []
    for r in (4, 2, 2, 2):
        stride *= r
        strides.append(stride)
    assert strides == [4, 8, 16, 32]
    assert ops.conv2d_output_size(64, 3, 4, 1, 1) == 16
