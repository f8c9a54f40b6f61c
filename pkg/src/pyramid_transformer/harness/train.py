"""Toy detector training: backbone + dense head, AdamW, warmup and step decay, drop path."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..backbone import (
    Backbone,
    BackboneConfig,
    CheckpointError,
    build_backbone,
    forward_pyramid,
    read_checkpoint,
    save_checkpoint,
)
from ..detection_eval import Detection, evaluate
from ..module import Module, Parameter
from ..ops import cross_entropy, smooth_l1
from ..tensor import Tensor, no_grad
from .head import ToyHeadParams, assign_targets, postprocess, toy_head_forward
from .synthetic import SyntheticScene

logger = logging.getLogger(__name__)

BASE_LR = 1e-4
WEIGHT_DECAY = 2e-4
DROP_PATH = 0.2
WARMUP_FRACTION = 0.05
BATCH_SIZE = 8
HEAD_STAGE = 3


class DropPath:
    """Per-sample stochastic depth on a residual branch: zero with prob ``rate``, else scale by ``1/(1-rate)``."""

    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"drop path rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, branch: Tensor) -> Tensor:
        if self.rate == 0.0:
            return branch
        keep = 1.0 - self.rate
        shape = (branch.shape[0],) + (1,) * (branch.ndim - 1)
        mask = (self.rng.random(shape) < keep).astype(branch.dtype) / keep
        return branch * Tensor(mask)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Parameter], lr: float = BASE_LR, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = WEIGHT_DECAY):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LRSchedule:
    """Linear warmup from ``base/warmup`` to ``base``, then x0.1 at 7/12 and 11/12 of the epochs."""

    base_lr: float
    warmup_steps: int
    steps_per_epoch: int
    epochs: int

    @property
    def milestones(self) -> tuple[int, int]:
        return round(self.epochs * 7 / 12), round(self.epochs * 11 / 12)

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        epoch = step // max(self.steps_per_epoch, 1)
        decays = sum(epoch >= m for m in self.milestones)
        return self.base_lr * 0.1**decays


def warmup_steps_for(total_steps: int) -> int:
    return max(1, round(WARMUP_FRACTION * total_steps))


class Detector(Module):
    def __init__(self, cfg: BackboneConfig, num_classes: int, dtype=np.float32):
        self.backbone = build_backbone(cfg, dtype)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
        self.head = ToyHeadParams(cfg.stages[HEAD_STAGE - 1].dim_out, num_classes, rng, dtype)

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    @property
    def stride(self) -> int:
        return self.config.strides[HEAD_STAGE - 1]

    def __call__(self, images, mode: str = "eval", drop_path=None) -> tuple[Tensor, Tensor]:
        pyramid = forward_pyramid(self.backbone, images, mode, drop_path)
        return toy_head_forward(pyramid.features[HEAD_STAGE - 1], self.head)


@dataclass
class TrainLog:
    seed: int
    config: str
    losses: list[float] = field(default_factory=list)
    val_map50: list[float] = field(default_factory=list)
    steps_per_epoch: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainLog":
        return cls(**obj)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        """Mean loss over the last epoch."""
        n = self.steps_per_epoch or 1
        return float(np.mean(self.losses[-n:]))


def split_dataset(scenes: list[SyntheticScene], seed: int, train_fraction: float = 0.8):
    order = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,))).permutation(len(scenes))
    n_train = int(round(train_fraction * len(scenes)))
    return [scenes[i] for i in order[:n_train]], [scenes[i] for i in order[n_train:]]


def detection_loss(logits: Tensor, offsets: Tensor, scenes: list[SyntheticScene], stride: int, num_classes: int) -> Tensor:
    """Mean per-cell cross-entropy + smooth-L1 on offsets of positive cells (averaged over positives)."""
    grid = logits.shape[1:3]
    classes, targets, positive = zip(*(assign_targets(s.annotations, grid, stride, num_classes) for s in scenes))
    classes = np.stack(classes)
    targets = np.stack(targets).astype(offsets.dtype)
    positive = np.stack(positive)
    loss = cross_entropy(logits, classes, axis=-1)
    n_pos = int(positive.sum())
    if n_pos:
        mask = Tensor(positive[..., None].astype(offsets.dtype))
        loss = loss + (smooth_l1(offsets, targets) * mask).sum() * (1.0 / n_pos)
    return loss


def _batch_images(scenes: list[SyntheticScene], dtype) -> np.ndarray:
    return np.stack([s.image for s in scenes]).astype(dtype)


def infer(model: Detector, scenes: list[SyntheticScene], batch_size: int = BATCH_SIZE,
          score_thresh: float = 0.05) -> list[Detection]:
    dets: list[Detection] = []
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            batch = scenes[start : start + batch_size]
            images = _batch_images(batch, model.backbone.dtype)
            logits, offsets = model(images, "eval")
            dets.extend(
                postprocess(logits.data, offsets.data, model.stride, [s.scene_id for s in batch],
                            images.shape[2:], score_thresh=score_thresh)
            )
    return dets


def evaluate_scenes(model: Detector, scenes: list[SyntheticScene]):
    dets = infer(model, scenes)
    gts = [a for s in scenes for a in s.annotations]
    return evaluate(dets, gts, image_ids=[s.scene_id for s in scenes])


def train_toy(
    cfg: BackboneConfig,
    dataset: list[SyntheticScene],
    epochs: int,
    num_classes: int,
    seed: int | None = None,
    batch_size: int = BATCH_SIZE,
    base_lr: float = BASE_LR,
    weight_decay: float = WEIGHT_DECAY,
    drop_path: float = DROP_PATH,
) -> tuple[TrainLog, Detector]:
    """Train backbone + head on an 80/20 split; returns the log and the trained model."""
    seed = cfg.seed if seed is None else seed
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    train_set, val_set = split_dataset(dataset, seed)
    if not train_set:
        raise ValueError("training split is empty")
    model = Detector(cfg, num_classes)
    params = model.parameters()
    opt = AdamW(params, lr=base_lr, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / batch_size)
    schedule = LRSchedule(base_lr, warmup_steps_for(steps_per_epoch * epochs), steps_per_epoch, epochs)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    dp = DropPath(drop_path, rng) if drop_path > 0 else None
    log = TrainLog(seed=seed, config=cfg.to_text(), steps_per_epoch=steps_per_epoch)

    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_set))
        for start in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[start : start + batch_size]]
            opt.lr = schedule(step)
            opt.zero_grad()
            logits, offsets = model(_batch_images(batch, np.float32), "train", dp)
            loss = detection_loss(logits, offsets, batch, model.stride, num_classes)
            value = loss.item()
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss {value} at step {step}")
            loss.backward()
            opt.step()
            log.losses.append(value)
            step += 1
        val_map = evaluate_scenes(model, val_set).map_50 if val_set else 0.0
        log.val_map50.append(float(val_map))
        logger.info("epoch %d: loss %.4f val mAP@0.50 %.4f", epoch, np.mean(log.losses[-steps_per_epoch:]), val_map)
    return log, model


def save_detector(model: Detector, path: str | os.PathLike) -> None:
    head = {f"head.{k}": v for k, v in model.head.state_dict().items()}
    save_checkpoint(model.backbone, path, extra=head)


def load_detector(path: str | os.PathLike, cfg: BackboneConfig) -> Detector:
    tensors = read_checkpoint(path, cfg)
    if "head.conv.weight" not in tensors:
        raise CheckpointError(f"{path}: no detection head tensors in checkpoint")
    num_classes = tensors["head.conv.weight"].shape[0] - 5
    model = Detector(cfg, num_classes)
    model.load_state_dict({k if k.startswith("head.") else f"backbone.{k}": v for k, v in tensors.items()})
    return model
