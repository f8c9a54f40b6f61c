"""Pyramid Block and Normal Block.

A Pyramid Block downsamples a feature map by ``r`` with two parallel branches:

* global: parallel dilated, strided convolutions (the pyramid reduction
  module, PRM) whose outputs are concatenated on channels, flattened to tokens
  and passed through pre-norm MHSA;
* local: a stack of three 3x3 convolutions with batch norm (the parallel
  convolutional module, PCM) whose strides multiply to ``r``.

The two token sequences are summed, an FFN is applied inside a residual and
the result is folded back into a map. A Normal Block keeps the resolution, has
no PRM, and lets the class token bypass its convolutional branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .module import Module, Parameter, kaiming_normal
from .ops import batch_norm, conv2d, gelu
from .tensor import Tensor, concat
from .transformer import (
    AttentionParams,
    DropPath,
    FFNParams,
    LayerNorm,
    TokenSequence,
    ffn,
    img2seq,
    mhsa,
    seq2img,
)

PCM_STRIDES = {1: (1, 1, 1), 2: (2, 1, 1), 4: (2, 2, 1)}


@dataclass(frozen=True)
class StageConfig:
    dim_in: int
    dim_out: int
    reduction_ratio: int = 2
    dilations: tuple[int, ...] = (1, 2, 3, 4)
    num_heads: int = 1
    nb_depth: int = 0
    ffn_expansion: float = 4.0
    prm_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.dim_in < 1 or self.dim_out < 1:
            raise ValueError(f"dim_in/dim_out must be positive, got {self.dim_in}/{self.dim_out}")
        if not self.dilations:
            raise ValueError("dilations must not be empty")
        if any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must all be >= 1, got {self.dilations}")
        if self.dim_out % len(self.dilations):
            raise ValueError(f"dim_out {self.dim_out} is not divisible by the {len(self.dilations)} PRM branches")
        if self.num_heads < 1 or self.dim_out % self.num_heads:
            raise ValueError(f"dim_out {self.dim_out} is not divisible by num_heads {self.num_heads}")
        if self.reduction_ratio not in PCM_STRIDES:
            raise ValueError(f"reduction_ratio must be one of {sorted(PCM_STRIDES)}, got {self.reduction_ratio}")
        if self.nb_depth < 0:
            raise ValueError(f"nb_depth must be >= 0, got {self.nb_depth}")
        if self.ffn_expansion <= 0:
            raise ValueError(f"ffn_expansion must be positive, got {self.ffn_expansion}")
        if self.prm_kernel < 1 or self.prm_kernel % 2 == 0:
            raise ValueError(f"prm_kernel must be a positive odd int, got {self.prm_kernel}")

    @property
    def branch_channels(self) -> int:
        return self.dim_out // len(self.dilations)


# -------------------------------------------------------------------- params


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, dtype=np.float32, bias=True):
        self.weight = Parameter(kaiming_normal(rng, (c_out, c_in, kernel, kernel), dtype=dtype))
        if bias:
            self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    @property
    def has_bias(self) -> bool:
        return "bias" in vars(self)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, train)


class PRMParams(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator, dtype=np.float32):
        self.branches = [
            Conv(cfg.dim_in, cfg.branch_channels, cfg.prm_kernel, rng, dtype) for _ in cfg.dilations
        ]


class PCMParams(Module):
    """Three 3x3 conv + BN layers; convs are bias-free because BN follows each one."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float32):
        self.convs = [Conv(c_in if i == 0 else c_out, c_out, 3, rng, dtype, bias=False) for i in range(3)]
        self.bns = [BatchNorm(c_out, dtype) for _ in range(3)]


class PyramidBlockParams(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.dim_out
        self.prm = PRMParams(cfg, rng, dtype)
        self.pcm = PCMParams(cfg.dim_in, d, rng, dtype)
        self.ln_attn = LayerNorm(d, dtype)
        self.attn = AttentionParams(d, cfg.num_heads, rng, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        self.ffn = FFNParams(d, cfg.ffn_expansion, rng, dtype)


class NormalBlockParams(Module):
    def __init__(self, cfg: StageConfig, rng: np.random.Generator, dtype=np.float32):
        d = cfg.dim_out
        self.ln_attn = LayerNorm(d, dtype)
        self.attn = AttentionParams(d, cfg.num_heads, rng, dtype)
        self.local = PCMParams(d, d, rng, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        self.ffn = FFNParams(d, cfg.ffn_expansion, rng, dtype)


# ------------------------------------------------------------------------ ops


def _check_divisible(h: Tensor, r: int, what: str) -> None:
    _, _, height, width = h.shape
    if height % r or width % r:
        pad_h, pad_w = (-height) % r, (-width) % r
        raise ValueError(
            f"{what}: spatial extents {height}x{width} are not divisible by reduction ratio {r}; "
            f"pad by ({pad_h}, {pad_w}) to reach {height + pad_h}x{width + pad_w}"
        )


def prm(h: Tensor, cfg: StageConfig, params: PRMParams) -> Tensor:
    """Concatenate the stride-``r`` dilated convolutions of each branch along channels."""
    if h.ndim != 4:
        raise ValueError(f"prm expects [B, C, H, W], got {h.shape}")
    _check_divisible(h, cfg.reduction_ratio, "prm")
    if len(params.branches) != len(cfg.dilations):
        raise ValueError(f"{len(params.branches)} PRM branches for {len(cfg.dilations)} dilations")
    outs = []
    for dilation, branch in zip(cfg.dilations, params.branches):
        k = branch.weight.shape[-1]
        pad = dilation * (k - 1) // 2
        outs.append(
            conv2d(h, branch.weight, branch.bias if branch.has_bias else None,
                   stride=cfg.reduction_ratio, dilation=dilation, padding=pad)
        )
    return outs[0] if len(outs) == 1 else concat(outs, axis=1)


def conv_stack(h: Tensor, params: PCMParams, strides: tuple[int, ...], train: bool) -> Tensor:
    """conv-BN-GELU, conv-BN-GELU, conv-BN."""
    x = h
    last = len(params.convs) - 1
    for i, (conv, bn, s) in enumerate(zip(params.convs, params.bns, strides)):
        x = conv2d(x, conv.weight, conv.bias if conv.has_bias else None, stride=s, padding=1)
        x = bn(x, train)
        if i < last:
            x = gelu(x)
    return x


def pcm(h: Tensor, cfg: StageConfig, params: PCMParams, train: bool = False) -> Tensor:
    """Local branch of a Pyramid Block; cumulative stride equals ``cfg.reduction_ratio``."""
    if h.ndim != 4:
        raise ValueError(f"pcm expects [B, C, H, W], got {h.shape}")
    _check_divisible(h, cfg.reduction_ratio, "pcm")
    return conv_stack(h, params, PCM_STRIDES[cfg.reduction_ratio], train)


def _identity(t: Tensor) -> Tensor:
    return t


def pyramid_block(
    h: Tensor,
    cfg: StageConfig,
    params: PyramidBlockParams,
    train: bool = False,
    drop_path: DropPath | None = None,
) -> Tensor:
    """``[B, C, H, W] -> [B, D_out, H/r, W/r]``."""
    dp = drop_path or _identity
    ms = img2seq(prm(h, cfg, params.prm))
    g = mhsa(ms.with_tokens(params.ln_attn(ms.tokens)), params.attn).tokens
    local = img2seq(pcm(h, cfg, params.pcm, train)).tokens
    fused = g + local
    out = fused + dp(ffn(ms.with_tokens(params.ln_ffn(fused)), params.ffn).tokens)
    return seq2img(ms.with_tokens(out))


def normal_block(
    seq: TokenSequence,
    cfg: StageConfig,
    params: NormalBlockParams,
    train: bool = False,
    drop_path: DropPath | None = None,
) -> TokenSequence:
    """Resolution-preserving block: ``x + MHSA(LN(x)) + Local(x)`` then a pre-norm FFN residual.

    The local convolutional branch sees only the spatial tokens; the class
    token's local contribution is zero.
    """
    if seq.dim != cfg.dim_out:
        raise ValueError(f"sequence dim {seq.dim} does not match stage dim_out {cfg.dim_out}")
    if seq.spatial_hw is None:
        raise ValueError("normal_block needs spatial_hw for its convolutional branch")
    dp = drop_path or _identity
    x = seq.tokens
    g = mhsa(seq.with_tokens(params.ln_attn(x)), params.attn).tokens
    local = img2seq(conv_stack(seq2img(seq), params.local, PCM_STRIDES[1], train)).tokens
    if seq.has_class_token:
        b, _, d = local.shape
        local = concat([local, Tensor(np.zeros((b, 1, d), dtype=local.dtype))], axis=1)
    fused = x + dp(g) + dp(local)
    out = fused + dp(ffn(seq.with_tokens(params.ln_ffn(fused)), params.ffn).tokens)
    return seq.with_tokens(out)
