"""Double-precision gradient suite over every differentiable op and the PB / NB / backbone composites.

Each case builds a scalar loss as a weighted sum of an op's output (random
weights keep the seed gradient non-trivial) and runs :func:`grad_check` with
respect to one or more inputs or parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import ops
from .backbone import build_backbone, forward_pyramid, parse_config
from .blocks import (
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
from .gradcheck import grad_check
from .tensor import Tensor, concat, matmul
from .transformer import (
    AttentionParams,
    FFNParams,
    PositionalEmbedding,
    TokenSequence,
    ViTBlockParams,
    attach_class_and_pos,
    ffn,
    img2seq,
    mhsa,
    seq2img,
    vit_block,
)

TOLERANCE = 1e-4
F64 = np.float64


@dataclass
class GradResult:
    name: str
    error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _t(rng, *shape, grad=True, scale=1.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=grad, dtype=F64)


def _case(f: Callable[[], Tensor], wrt: list[Tensor], rng, max_coords: int | None = 60) -> float:
    probe = f()
    w = Tensor(rng.standard_normal(probe.shape), dtype=F64)
    loss = lambda: (f() * w).sum()  # noqa: E731
    return max(grad_check(loss, x, max_coords=max_coords, rng=rng) for x in wrt)


TINY_BACKBONE = """
input_channels = 3
image_size = 64, 64
class_token_stage = 3
seed = 11
dims = 4, 8, 8, 8
reduction_ratios = 4, 2, 2, 2
num_heads = 1, 2, 2, 2
nb_depths = 1, 1, 1, 1
ffn_expansion = 2, 2, 2, 2
dilations_1 = 1, 2
dilations_2 = 1, 2
dilations_3 = 1, 2
dilations_4 = 1, 2
"""


def iter_cases(seed: int = 0) -> Iterator[tuple[str, Callable[[np.random.Generator], float]]]:
    def elementwise(rng):
        a, b = _t(rng, 3, 4), _t(rng, 1, 4)
        pos = Tensor(rng.random((3, 4)) + 0.5, requires_grad=True, dtype=F64)
        return _case(lambda: (a + b) * a - b / pos + pos.log() + pos.sqrt() + (a * 0.3).exp() + a**3 - (-b),
                     [a, b, pos], rng)

    def reductions(rng):
        a = _t(rng, 2, 3, 4)
        return _case(lambda: a.sum(axis=1, keepdims=True) * a.mean(axis=(0, 2), keepdims=True) + a.sum(), [a], rng)

    def shaping(rng):
        a = _t(rng, 2, 3, 4)
        return _case(lambda: a.reshape(6, 4).transpose(1, 0)[1:3, ::2] * 2.0 + a.swapaxes(0, 2).reshape(4, 6)[1:3, ::2], [a], rng)

    def mm(rng):
        a, b = _t(rng, 2, 3, 4, 5), _t(rng, 5, 2)
        return _case(lambda: matmul(a, b), [a, b], rng)

    def conv(rng):
        worst = 0.0
        for stride, dil, pad, k in ((1, 1, 0, 3), (2, 2, 2, 3), (2, 3, 1, 3), (1, 1, 0, 1), (3, 1, 1, 3)):
            x, w, b = _t(rng, 2, 3, 9, 9), _t(rng, 4, 3, k, k), _t(rng, 4)
            worst = max(worst, _case(lambda: ops.conv2d(x, w, b, stride, dil, pad), [x, w, b], rng))
        return worst

    def sm(rng):
        x = _t(rng, 3, 5)
        return max(_case(lambda: ops.softmax(x, axis=-1), [x], rng), _case(lambda: ops.softmax(x, axis=0), [x], rng))

    def lsm(rng):
        x = _t(rng, 3, 5)
        return _case(lambda: ops.log_softmax(x, axis=-1), [x], rng)

    def ce(rng):
        x = _t(rng, 2, 3, 5)
        targets = rng.integers(0, 5, size=(2, 3))
        return _case(lambda: ops.cross_entropy(x, targets), [x], rng)

    def ln(rng):
        x, g, b = _t(rng, 2, 3, 6), _t(rng, 6), _t(rng, 6)
        return _case(lambda: ops.layer_norm(x, g, b), [x, g, b], rng)

    def bn(rng):
        worst = 0.0
        for train in (True, False):
            x, g, b = _t(rng, 3, 2, 4, 4), _t(rng, 2), _t(rng, 2)
            rm, rv = rng.standard_normal(2), rng.random(2) + 0.5
            worst = max(worst, _case(lambda: ops.batch_norm(x, g, b, rm.copy(), rv.copy(), train), [x, g, b], rng))
        return worst

    def gl(rng):
        x = _t(rng, 4, 5, scale=2.0)
        return _case(lambda: ops.gelu(x), [x], rng)

    def cat(rng):
        a, b = _t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)
        return _case(lambda: concat([a, b], axis=1) * concat([b, a], axis=1), [a, b], rng)

    def sl1(rng):
        x = _t(rng, 4, 6, scale=2.0)
        target = rng.standard_normal((4, 6))
        return _case(lambda: ops.smooth_l1(x, target), [x], rng)

    def resize(rng):
        t = _t(rng, 9, 3)
        return _case(lambda: ops.resize_grid_tokens(t, (3, 3), (5, 4)), [t], rng)

    def seqs(rng):
        f = _t(rng, 2, 3, 4, 2)
        return _case(lambda: seq2img(img2seq(f * f)), [f], rng)

    def attach(rng):
        tok = _t(rng, 2, 4, 3)
        cls = _t(rng, 1, 1, 3)
        pos = PositionalEmbedding((3, 3), 3, True, rng, F64)
        seq = lambda: TokenSequence(tok, False, (2, 2))  # noqa: E731
        return _case(lambda: attach_class_and_pos(seq(), cls, pos).tokens, [tok, cls, pos.table], rng)

    def attn(rng):
        x = _t(rng, 2, 5, 8)
        p = AttentionParams(8, 2, rng, F64)
        return _case(lambda: mhsa(TokenSequence(x), p).tokens, [x, p.q.weight, p.k.weight, p.v.bias, p.o.weight], rng)

    def feed(rng):
        x = _t(rng, 2, 5, 6)
        p = FFNParams(6, 2.0, rng, F64)
        return _case(lambda: ffn(TokenSequence(x), p).tokens, [x, p.fc1.weight, p.fc2.bias], rng)

    def block(rng):
        x = _t(rng, 2, 5, 8)
        p = ViTBlockParams(8, 2, 2.0, rng, F64)
        return _case(lambda: vit_block(TokenSequence(x), p).tokens, [x, p.ln1.gamma, p.attn.v.weight, p.ffn.fc1.weight], rng)

    def prm_case(rng):
        cfg = StageConfig(3, 6, 2, (1, 2, 3), 1)
        x = _t(rng, 2, 3, 8, 8)
        p = PRMParams(cfg, rng, F64)
        return _case(lambda: prm(x, cfg, p), [x, p.branches[2].weight, p.branches[0].bias], rng)

    def pcm_case(rng):
        cfg = StageConfig(3, 4, 4, (1, 2), 1)
        x = _t(rng, 2, 3, 8, 8)
        p = PCMParams(3, 4, rng, F64)
        return _case(lambda: pcm(x, cfg, p, train=True), [x, p.convs[0].weight, p.bns[2].gamma], rng)

    def pb(rng):
        cfg = StageConfig(3, 8, 4, (1, 2), 2, 0, 2.0)
        x = _t(rng, 2, 3, 16, 16)
        p = PyramidBlockParams(cfg, rng, F64)
        wrt = [x, p.prm.branches[1].weight, p.pcm.convs[1].weight, p.attn.q.weight, p.ffn.fc1.weight, p.ln_ffn.beta]
        return max(_case(lambda: pyramid_block(x, cfg, p, train=True), wrt, rng),
                   _case(lambda: pyramid_block(x, cfg, p, train=False), wrt[:3], rng))

    def nb(rng):
        cfg = StageConfig(8, 8, 2, (1, 2), 2, 1, 2.0)
        x = _t(rng, 2, 17, 8)
        p = NormalBlockParams(cfg, rng, F64)
        wrt = [x, p.local.convs[2].weight, p.attn.k.weight, p.ffn.fc2.weight, p.ln_attn.gamma]
        return _case(lambda: normal_block(TokenSequence(x, True, (4, 4)), cfg, p, train=True).tokens, wrt, rng)

    def backbone(rng):
        cfg = parse_config(TINY_BACKBONE)
        model = build_backbone(cfg, F64)
        x = Tensor(rng.random((2, 3, 64, 64)), requires_grad=True, dtype=F64)
        named = dict(model.named_parameters())
        picks = [named[k] for k in (
            "stages.0.pb.prm.branches.0.weight",
            "stages.1.pb.pcm.convs.0.weight",
            "stages.2.pos.table",
            "stages.3.cls_proj.weight",
            "stages.3.nbs.0.ffn.fc1.weight",
        )]

        def f4_and_cls():
            pyr = forward_pyramid(model, x, "train")
            return pyr.F4.sum() * 0.5 + (pyr.F3 * pyr.F3).mean() + pyr.class_token_out.sum()

        return _case(f4_and_cls, [x] + picks, rng, max_coords=25)

    yield "elementwise", elementwise
    yield "reductions", reductions
    yield "reshape_transpose_slice", shaping
    yield "matmul", mm
    yield "conv2d", conv
    yield "softmax", sm
    yield "log_softmax", lsm
    yield "cross_entropy", ce
    yield "layer_norm", ln
    yield "batch_norm", bn
    yield "gelu", gl
    yield "concat", cat
    yield "smooth_l1", sl1
    yield "resize_grid_tokens", resize
    yield "img2seq_seq2img", seqs
    yield "attach_class_and_pos", attach
    yield "mhsa", attn
    yield "ffn", feed
    yield "vit_block", block
    yield "prm", prm_case
    yield "pcm", pcm_case
    yield "pyramid_block", pb
    yield "normal_block", nb
    yield "backbone", backbone


def run_gradient_suite(seed: int = 0, names: list[str] | None = None) -> list[GradResult]:
    results = []
    for i, (name, case) in enumerate(iter_cases(seed)):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        start = time.perf_counter()
        err = case(rng)
        results.append(GradResult(name, float(err), time.perf_counter() - start))
    return results
