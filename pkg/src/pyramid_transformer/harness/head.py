"""One-layer dense detection head over F3 plus box encoding/decoding.

Every F3 cell predicts ``num_classes + 1`` logits (the last index is
background) and four log-scale distances from the cell center to the box
sides. With zero offsets a cell decodes to its own ``stride x stride`` square.
"""

from __future__ import annotations

import numpy as np

from ..blocks import Conv
from ..detection_eval import Box, Detection, GroundTruthBox, iou
from ..module import Module
from ..ops import conv2d, softmax
from ..tensor import Tensor

N_OFFSETS = 4


class ToyHeadParams(Module):
    def __init__(self, dim_in: int, num_classes: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.01):
        self._num_classes = num_classes
        self.conv = Conv(dim_in, num_classes + 1 + N_OFFSETS, 1, rng, dtype)
        self.conv.weight.data = (rng.standard_normal(self.conv.weight.shape) * std).astype(dtype)

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def out_channels(self) -> int:
        return self.conv.weight.shape[0]


def toy_head_forward(f3: Tensor, params: ToyHeadParams) -> tuple[Tensor, Tensor]:
    """Return ``(logits [B, H, W, K+1], offsets [B, H, W, 4])`` on the F3 grid."""
    if f3.ndim != 4:
        raise ValueError(f"F3 must be [B, D, H, W], got {f3.shape}")
    if f3.shape[1] != params.conv.weight.shape[1]:
        raise ValueError(f"F3 has {f3.shape[1]} channels but the head expects {params.conv.weight.shape[1]}")
    out = conv2d(f3, params.conv.weight, params.conv.bias).transpose(0, 2, 3, 1)
    k1 = params.num_classes + 1
    return out[..., :k1], out[..., k1:]


def cell_centers(grid_hw: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray]:
    h, w = grid_hw
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    return np.meshgrid(cy, cx, indexing="ij")


def decode_offsets(offsets: np.ndarray, stride: int) -> np.ndarray:
    """``[..., H, W, 4]`` log distances -> ``[..., H, W, 4]`` boxes ``x1, y1, x2, y2``."""
    h, w = offsets.shape[-3:-1]
    cy, cx = cell_centers((h, w), stride)
    dist = 0.5 * stride * np.exp(offsets)
    return np.stack([cx - dist[..., 0], cy - dist[..., 1], cx + dist[..., 2], cy + dist[..., 3]], axis=-1)


def encode_box(box: Box, center: tuple[float, float], stride: int) -> np.ndarray:
    """Inverse of :func:`decode_offsets` for one cell; the center must lie inside the box."""
    cy, cx = center
    dist = np.array([cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy], dtype=np.float64)
    if np.any(dist <= 0):
        raise ValueError(f"cell center {(cx, cy)} is not inside box {box}")
    return np.log(dist / (0.5 * stride))


def assign_targets(
    gts: list[GroundTruthBox], grid_hw: tuple[int, int], stride: int, num_classes: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell class targets (background = ``num_classes``), offset targets and positive mask.

    A cell is positive when its center is strictly inside a box; overlapping
    boxes resolve to the smallest one.
    """
    h, w = grid_hw
    classes = np.full((h, w), num_classes, dtype=np.int64)
    offsets = np.zeros((h, w, N_OFFSETS), dtype=np.float64)
    best_area = np.full((h, w), np.inf)
    cy, cx = cell_centers(grid_hw, stride)
    for g in gts:
        b = g.box
        inside = (cx > b.x1) & (cx < b.x2) & (cy > b.y1) & (cy < b.y2) & (b.area < best_area)
        for i, j in zip(*np.nonzero(inside)):
            classes[i, j] = g.class_id
            offsets[i, j] = encode_box(b, (cy[i, j], cx[i, j]), stride)
            best_area[i, j] = b.area
    return classes, offsets, classes != num_classes


def nms(boxes: np.ndarray, scores: np.ndarray, thr: float) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    keep: list[int] = []
    for i in order:
        bi = Box(*boxes[i])
        if all(iou(bi, Box(*boxes[k])) < thr for k in keep):
            keep.append(i)
    return keep


def postprocess(
    logits: np.ndarray,
    offsets: np.ndarray,
    stride: int,
    image_ids: list[str],
    image_hw: tuple[int, int],
    score_thresh: float = 0.05,
    nms_thresh: float = 0.5,
    max_per_image: int = 100,
) -> list[Detection]:
    """Turn dense head outputs for a batch into clipped, per-class NMS'd detections."""
    probs = softmax(Tensor(logits.astype(np.float64)), axis=-1).data[..., :-1]
    boxes = decode_offsets(offsets.astype(np.float64), stride)
    hmax, wmax = image_hw
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, wmax)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, hmax)
    dets: list[Detection] = []
    for b, image_id in enumerate(image_ids):
        cls = probs[b].argmax(axis=-1)
        score = probs[b].max(axis=-1)
        keep = (score >= score_thresh) & (boxes[b, ..., 2] > boxes[b, ..., 0]) & (boxes[b, ..., 3] > boxes[b, ..., 1])
        cand_boxes, cand_scores, cand_cls = boxes[b][keep], score[keep], cls[keep]
        image_dets = []
        for c in np.unique(cand_cls):
            sel = np.nonzero(cand_cls == c)[0]
            for k in nms(cand_boxes[sel], cand_scores[sel], nms_thresh):
                i = sel[k]
                image_dets.append(
                    Detection(image_id, int(c), Box(*map(float, cand_boxes[i])), float(min(max(cand_scores[i], 0.0), 1.0)))
                )
        image_dets.sort(key=lambda d: -d.score)
        dets.extend(image_dets[:max_per_image])
    return dets
