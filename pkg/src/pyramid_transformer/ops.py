"""Differentiable neural-network operations built on :mod:`.tensor`.

Each op computes its forward with numpy and supplies a hand-written backward.
All of them are exercised against central finite differences in the test
suite.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import Tensor, unbroadcast

LAYER_NORM_EPS = 1e-6
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected an int pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _check_finite(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: input contains non-finite values")


def conv2d_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    effective = (kernel - 1) * dilation + 1
    return (size + 2 * padding - effective) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, dilation=1, padding=0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is ``[N, C, H, W]`` and ``weight`` is ``[K, C, kh, kw]``.
    """
    sh, sw = _pair(stride)
    dh, dw = _pair(dilation)
    ph, pw = _pair(padding)
    if min(sh, sw, dh, dw) < 1 or min(ph, pw) < 0:
        raise ValueError(f"conv2d: bad stride {stride!r} / dilation {dilation!r} / padding {padding!r}")
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be rank 4 [N,C,H,W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be rank 4 [K,C,kh,kw], got shape {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if wc != c:
        raise ValueError(f"conv2d: channel axis mismatch, input has {c} channels but weight expects {wc}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channels {k}")
    eff_h, eff_w = (kh - 1) * dh + 1, (kw - 1) * dw + 1
    if h + 2 * ph < eff_h:
        raise ValueError(f"conv2d: height axis too small, padded height {h + 2 * ph} < effective kernel {eff_h}")
    if w + 2 * pw < eff_w:
        raise ValueError(f"conv2d: width axis too small, padded width {w + 2 * pw} < effective kernel {eff_w}")
    ho = conv2d_output_size(h, kh, sh, dh, ph)
    wo = conv2d_output_size(w, kw, sw, dw, pw)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: zero-sized output ({ho}x{wo})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dh, j * dw
            cols[:, :, i, j] = xp[:, :, y0 : y0 + sh * (ho - 1) + 1 : sh, x0 : x0 + sw * (wo - 1) + 1 : sw]
    cols2 = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(k, c * kh * kw)
    out = np.matmul(w2, cols2).reshape(n, k, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, k, 1, 1)

    padded_shape = xp.shape

    def backward(g):
        g2 = g.reshape(n, k, ho * wo)
        gw = np.tensordot(g2, cols2, axes=([0, 2], [0, 2])).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    y0, x0 = i * dh, j * dw
                    gxp[:, :, y0 : y0 + sh * (ho - 1) + 1 : sh, x0 : x0 + sw * (wo - 1) + 1 : sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph : ph + h, pw : pw + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: last axis {x.shape[-1]} does not match weight input extent {weight.shape[0]}")
    y = x @ weight
    return y + bias if bias is not None else y


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(y, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis with biased variance, then apply ``gamma``/``beta``."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(out, (x, gamma, beta), backward, "layer_norm")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BATCH_NORM_EPS,
    momentum: float = BATCH_NORM_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization of ``[N, C, H, W]``.

    In train mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place with an exponential moving average
    (unbiased variance). Eval mode uses the running statistics, which start at
    mean 0 / variance 1 for a freshly initialized layer.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: channel axis {c} does not match gamma/beta {gamma.shape}/{beta.shape}")
    shape = (1, c, 1, 1)
    g_d, b_d = gamma.data.reshape(shape), beta.data.reshape(shape)
    if not train:
        inv = 1.0 / np.sqrt(running_var.reshape(shape) + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv
        out = (xhat * g_d + b_d).astype(x.dtype, copy=False)

        def backward_eval(g):
            return g * inv * g_d, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return Tensor._make(out, (x, gamma, beta), backward_eval, "batch_norm")

    m = n * h * w
    if m < 2:
        raise ValueError(f"batch_norm: train mode needs N*H*W >= 2, got {m}")
    mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_d + b_d
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu.reshape(c)
    running_var *= 1.0 - momentum
    running_var += momentum * var.reshape(c) * (m / (m - 1))

    def backward(g):
        gxhat = g * g_d
        gx = inv * (
            gxhat - gxhat.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF from ``erf``."""
    a = x.data
    cdf = 0.5 * (1.0 + erf(a * _INV_SQRT2))
    out = (a * cdf).astype(a.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a * a)
        return (g * (cdf + a * pdf),)

    return Tensor._make(out, (x,), backward, "gelu")


def cross_entropy(logits: Tensor, targets: np.ndarray, axis: int = -1, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    logp = log_softmax(logits, axis=axis)
    onehot = np.moveaxis(np.eye(logits.shape[axis], dtype=logits.dtype)[targets], -1, axis)
    picked = (logp * Tensor(onehot)).sum(axis=axis)
    if weights is None:
        return -picked.mean()
    w = np.asarray(weights, dtype=logits.dtype)
    return -(picked * Tensor(w)).sum() * (1.0 / max(float(w.sum()), 1e-12))


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss (not reduced)."""
    diff = pred.data - target
    ad = np.abs(diff)
    quad = ad < beta
    out = np.where(quad, 0.5 * diff * diff / beta, ad - 0.5 * beta).astype(pred.dtype, copy=False)

    def backward(g):
        return (g * np.where(quad, diff / beta, np.sign(diff)),)

    return Tensor._make(out, (pred,), backward, "smooth_l1")


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """1-D linear interpolation operator ``[n_out, n_in]`` with half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def resize_grid_tokens(table: Tensor, grid_in: tuple[int, int], grid_out: tuple[int, int]) -> Tensor:
    """Bilinearly resample ``[1, Hi*Wi, D]`` grid tokens to ``[1, Ho*Wo, D]``.

    Separable interpolation expressed as one Kronecker-product matrix so the
    gradient reaches the table through :func:`matmul`.
    """
    if tuple(grid_in) == tuple(grid_out):
        return table
    ry = bilinear_matrix(grid_out[0], grid_in[0], dtype=table.dtype)
    rx = bilinear_matrix(grid_out[1], grid_in[1], dtype=table.dtype)
    return Tensor(np.kron(ry, rx)) @ table


__all__ = [
    "conv2d",
    "conv2d_output_size",
    "linear",
    "softmax",
    "log_softmax",
    "layer_norm",
    "batch_norm",
    "gelu",
    "cross_entropy",
    "smooth_l1",
    "bilinear_matrix",
    "resize_grid_tokens",
    "unbroadcast",
]
