"""Vanilla ViT pieces: token sequences, class/positional tokens, MHSA, FFN and the pre-norm block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .module import Module, Parameter, trunc_normal
from .ops import gelu, layer_norm, linear, resize_grid_tokens, softmax
from .tensor import Tensor, concat, is_grad_enabled

DropPath = Callable[[Tensor], Tensor]


@dataclass
class TokenSequence:
    """``tokens`` is ``[B, L, D]``; a class token, when present, is the last position."""

    tokens: Tensor
    has_class_token: bool = False
    spatial_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError(f"tokens must be [B, L, D], got {self.tokens.shape}")
        if self.spatial_hw is not None:
            h, w = self.spatial_hw
            expected = h * w + (1 if self.has_class_token else 0)
            if expected != self.tokens.shape[1]:
                raise ValueError(
                    f"spatial_hw {self.spatial_hw} implies length {expected} but sequence has {self.tokens.shape[1]}"
                )

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.has_class_token, self.spatial_hw)

    def spatial_tokens(self) -> Tensor:
        return self.tokens[:, :-1, :] if self.has_class_token else self.tokens

    def class_token(self) -> Tensor | None:
        return self.tokens[:, -1:, :] if self.has_class_token else None


# -------------------------------------------------------------------- params


class Linear(Module):
    """Affine map with weight stored ``[in, out]``."""

    def __init__(self, dim_in: int, dim_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = Parameter(trunc_normal(rng, (dim_in, dim_out), dtype=dtype))
        self.bias = Parameter(np.zeros(dim_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self._eps)


class AttentionParams(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if num_heads < 1 or dim % num_heads:
            raise ValueError(f"embedding dim {dim} is not divisible by num_heads {num_heads}")
        self._num_heads = num_heads
        self.q = Linear(dim, dim, rng, dtype)
        self.k = Linear(dim, dim, rng, dtype)
        self.v = Linear(dim, dim, rng, dtype)
        self.o = Linear(dim, dim, rng, dtype)

    @property
    def num_heads(self) -> int:
        return self._num_heads

    @property
    def dim(self) -> int:
        return self.q.weight.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self._num_heads


class FFNParams(Module):
    def __init__(self, dim: int, expansion: float, rng: np.random.Generator, dtype=np.float32):
        hidden = int(round(dim * expansion))
        if hidden < 1:
            raise ValueError(f"FFN hidden width must be positive (dim={dim}, expansion={expansion})")
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)


class PositionalEmbedding(Module):
    """Learnable table ``[1, gh*gw (+1), D]`` laid out like the token sequence."""

    def __init__(self, grid_hw: tuple[int, int], dim: int, with_class: bool, rng: np.random.Generator, dtype=np.float32):
        self._grid = (int(grid_hw[0]), int(grid_hw[1]))
        self._with_class = with_class
        length = self._grid[0] * self._grid[1] + (1 if with_class else 0)
        self.table = Parameter(trunc_normal(rng, (1, length, dim), dtype=dtype))

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self._grid

    @property
    def with_class(self) -> bool:
        return self._with_class


class ViTBlockParams(Module):
    def __init__(self, dim: int, num_heads: int, expansion: float, rng: np.random.Generator, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = AttentionParams(dim, num_heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.ffn = FFNParams(dim, expansion, rng, dtype)


# ------------------------------------------------------------------------ ops


def img2seq(feature_map: Tensor) -> TokenSequence:
    """``[B, D, H, W]`` -> tokens with ``tokens[b, y*W + x] == feature_map[b, :, y, x]``."""
    if feature_map.ndim != 4:
        raise ValueError(f"img2seq expects [B, D, H, W], got {feature_map.shape}")
    b, d, h, w = feature_map.shape
    tokens = feature_map.reshape(b, d, h * w).transpose(0, 2, 1)
    return TokenSequence(tokens, has_class_token=False, spatial_hw=(h, w))


def seq2img(seq: TokenSequence) -> Tensor:
    """Inverse of :func:`img2seq`; a class token is dropped first."""
    if seq.spatial_hw is None:
        raise ValueError("seq2img needs spatial_hw on the sequence")
    h, w = seq.spatial_hw
    tokens = seq.spatial_tokens()
    b, _, d = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, d, h, w)


def attach_class_and_pos(seq: TokenSequence, cls, pos: PositionalEmbedding | None) -> TokenSequence:
    """Append the class token after the patch tokens and add the positional table."""
    if seq.has_class_token:
        raise ValueError("sequence already carries a class token")
    b, _, d = seq.tokens.shape
    tokens = seq.tokens
    has_cls = cls is not None
    if has_cls:
        cls_t = cls if isinstance(cls, Tensor) else Tensor(np.asarray(cls, dtype=tokens.dtype))
        if cls_t.shape != (1, 1, d):
            raise ValueError(f"class token shape {cls_t.shape} does not match (1, 1, {d})")
        cls_b = cls_t + Tensor(np.zeros((b, 1, d), dtype=tokens.dtype))
        tokens = concat([tokens, cls_b], axis=1)
    if pos is not None:
        table = pos.table
        if table.shape[-1] != d:
            raise ValueError(f"positional table dim {table.shape[-1]} does not match token dim {d}")
        grid_tokens = table[:, :-1, :] if pos.with_class else table
        if seq.spatial_hw is not None and tuple(seq.spatial_hw) != pos.grid_hw:
            grid_tokens = resize_grid_tokens(grid_tokens[0], pos.grid_hw, seq.spatial_hw).reshape(1, -1, d)
        elif grid_tokens.shape[1] != seq.length:
            raise ValueError(f"positional table covers {grid_tokens.shape[1]} tokens, sequence has {seq.length}")
        if has_cls:
            cls_pos = table[:, -1:, :] if pos.with_class else Tensor(np.zeros((1, 1, d), dtype=tokens.dtype))
            full = concat([grid_tokens, cls_pos], axis=1)
        else:
            full = grid_tokens
        tokens = tokens + full
    return TokenSequence(tokens, has_class_token=has_cls, spatial_hw=seq.spatial_hw)


def _split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, length, d = x.shape
    return x.reshape(b, length, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def attention_weights(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Return ``(weights [B, h, L, L], values [B, h, L, hd])`` for tokens ``x``."""
    nh = params.num_heads
    q = _split_heads(params.q(x) * (1.0 / np.sqrt(params.head_dim)), nh)
    k = _split_heads(params.k(x), nh)
    v = _split_heads(params.v(x), nh)
    return softmax(q @ k.swapaxes(-1, -2), axis=-1), v


def mhsa(seq: TokenSequence, params: AttentionParams) -> TokenSequence:
    """Multi-head scaled dot-product self-attention over all tokens (no residual, no norm)."""
    d = seq.dim
    if d != params.dim:
        raise ValueError(f"sequence dim {d} does not match attention dim {params.dim}")
    if d % params.num_heads:
        raise ValueError(f"embedding dim {d} is not divisible by num_heads {params.num_heads}")
    b, length = seq.batch, seq.length
    if not is_grad_enabled() and b * params.num_heads * length * length > _CHUNK_ELEMENTS:
        mixed = Tensor(_chunked_attention(seq.tokens, params))
    else:
        attn, v = attention_weights(seq.tokens, params)
        mixed = (attn @ v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return seq.with_tokens(params.o(mixed))


_CHUNK_ELEMENTS = 1 << 24


def _chunked_attention(x: Tensor, params: AttentionParams) -> np.ndarray:
    """Inference-only attention over query blocks so the score matrix never materializes whole."""
    nh = params.num_heads
    q = _split_heads(params.q(x), nh).data
    k = _split_heads(params.k(x), nh).data
    v = _split_heads(params.v(x), nh).data
    b, _, length, hd = q.shape
    scale = 1.0 / np.sqrt(hd)
    kt = np.swapaxes(k, -1, -2)
    rows = max(1, _CHUNK_ELEMENTS // (b * nh * length))
    out = np.empty_like(q)
    for start in range(0, length, rows):
        s = (q[:, :, start : start + rows] @ kt) * scale
        s -= s.max(axis=-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=-1, keepdims=True)
        out[:, :, start : start + rows] = s @ v
    return out.transpose(0, 2, 1, 3).reshape(b, length, nh * hd)


def ffn(seq: TokenSequence, params: FFNParams) -> TokenSequence:
    x = seq.tokens
    if x.shape[-1] != params.fc1.weight.shape[0]:
        raise ValueError(f"FFN input dim {params.fc1.weight.shape[0]} does not match token dim {x.shape[-1]}")
    return seq.with_tokens(params.fc2(gelu(params.fc1(x))))


def _identity(t: Tensor) -> Tensor:
    return t


def vit_block(seq: TokenSequence, params: ViTBlockParams, drop_path: DropPath | None = None) -> TokenSequence:
    """Pre-norm transformer block: ``y = x + MHSA(LN(x))``, ``out = y + FFN(LN(y))``."""
    dp = drop_path or _identity
    x = seq.tokens
    y = x + dp(mhsa(seq.with_tokens(params.ln1(x)), params.attn).tokens)
    out = y + dp(ffn(seq.with_tokens(params.ln2(y)), params.ffn).tokens)
    return seq.with_tokens(out)
