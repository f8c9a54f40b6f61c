"""COCO-style box detection evaluation: IoU, greedy matching, 101-point AP, mAP."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.arange(101) / 100.0  # exact i/100 levels; linspace is off by an ulp at ten of them


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box has non-finite coordinates: {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {vals}: need x2 > x1 and y2 > y1")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: int
    box: Box


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be finite and within [0, 1], got {self.score}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    per_class: dict[int, dict[float, float]] = field(default_factory=dict)
    map_50: float | None = None
    map_75: float | None = None
    map: float = 0.0

    def to_json(self) -> dict:
        return {
            "per_class": {
                str(c): {f"{t:.2f}": ap for t, ap in sorted(aps.items())} for c, aps in sorted(self.per_class.items())
            },
            "map_50": self.map_50,
            "map_75": self.map_75,
            "map": self.map,
        }

    def table(self) -> str:
        cols = [t for t in (0.5, 0.75) if t in self.thresholds]
        header = f"{'class':>7} {'AP':>8}" + "".join(f" {'AP' + str(int(round(t * 100))):>8}" for t in cols)
        lines = [header, "-" * len(header)]
        for c, aps in sorted(self.per_class.items()):
            mean_ap = float(np.mean([aps[t] for t in self.thresholds]))
            lines.append(f"{c:>7} {mean_ap:8.4f}" + "".join(f" {aps[t]:8.4f}" for t in cols))
        lines.append("-" * len(header))
        summary = f"{'mAP':>7} {self.map:8.4f}"
        for t, v in zip(cols, (self.map_50, self.map_75)):
            summary += f" {v:8.4f}"
        lines.append(summary)
        return "\n".join(lines)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _score_order(dets: Sequence[Detection]) -> list[int]:
    # stable: equal scores keep input order
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GroundTruthBox], thr: float
) -> tuple[list[bool], int]:
    """Greedy one-to-one matching for a single class.

    Detections are visited in descending score; each takes the still-unmatched
    ground truth in its own image with the highest IoU >= ``thr`` (ties go to
    the earlier ground truth). Returns TP flags aligned with ``dets`` and the
    number of ground truths left unmatched.
    """
    by_image: dict[str, list[int]] = defaultdict(list)
    for j, g in enumerate(gts):
        by_image[g.image_id].append(j)
    taken = [False] * len(gts)
    labels = [False] * len(dets)
    for i in _score_order(dets):
        d = dets[i]
        best, best_iou = -1, thr
        for j in by_image.get(d.image_id, ()):
            if taken[j]:
                continue
            o = iou(d.box, gts[j].box)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
            labels[i] = True
    return labels, taken.count(False)


def precision_envelope(labels: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Recall and monotone (non-increasing) interpolated precision at each cutoff."""
    tp = np.cumsum(np.asarray(labels, dtype=np.float64))
    k = np.arange(1, len(labels) + 1, dtype=np.float64)
    recall = tp / n_gt
    precision = tp / k
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(labels) else precision
    return recall, envelope


def average_precision(labels: Sequence[bool], n_gt: int) -> float:
    """101-point interpolated AP for TP/FP ``labels`` already sorted by descending score."""
    if n_gt < 1:
        raise ValueError("average_precision needs at least one ground truth")
    if len(labels) == 0:
        return 0.0
    recall, envelope = precision_envelope(labels, n_gt)
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    thresholds: Iterable[float] = COCO_THRESHOLDS,
    image_ids: Iterable[str] | None = None,
) -> EvalReport:
    """Per-class AP at each IoU threshold, pooled over images.

    ``image_ids`` lists the known images (including ones without objects);
    by default it is the set of images that appear in ``gts``. A detection on
    an unknown image is rejected.
    """
    thresholds = tuple(float(t) for t in thresholds)
    known = set(image_ids) if image_ids is not None else {g.image_id for g in gts}
    for g in gts:
        if g.image_id not in known:
            raise ValueError(f"ground truth references unknown image id {g.image_id!r}")
    for d in dets:
        if d.image_id not in known:
            raise ValueError(f"detection references unknown image id {d.image_id!r}")

    gts_by_class: dict[int, list[GroundTruthBox]] = defaultdict(list)
    for g in gts:
        gts_by_class[g.class_id].append(g)
    dets_by_class: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        dets_by_class[d.class_id].append(d)

    report = EvalReport(thresholds=thresholds)
    for c in sorted(gts_by_class):
        cls_dets = dets_by_class.get(c, [])
        order = _score_order(cls_dets)
        aps = {}
        for t in thresholds:
            labels, _ = match_detections(cls_dets, gts_by_class[c], t)
            aps[t] = average_precision([labels[i] for i in order], len(gts_by_class[c]))
        report.per_class[c] = aps

    def mean_at(t: float) -> float | None:
        if t not in thresholds:
            return None
        if not report.per_class:
            return 0.0
        return float(np.mean([aps[t] for aps in report.per_class.values()]))

    report.map_50 = mean_at(0.5)
    report.map_75 = mean_at(0.75)
    if report.per_class:
        report.map = float(np.mean([np.mean([aps[t] for t in thresholds]) for aps in report.per_class.values()]))
    return report


# ------------------------------------------------------------------ file I/O


def _box_from(obj: dict, where: str) -> Box:
    bbox = obj.get("bbox")
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise ValueError(f"{where}: 'bbox' must be [x1, y1, x2, y2]")
    return Box(*(float(v) for v in bbox))


def detections_from_json(records: list[dict]) -> list[Detection]:
    return [
        Detection(str(r["image_id"]), int(r["class_id"]), _box_from(r, f"detection {i}"), float(r["score"]))
        for i, r in enumerate(records)
    ]


def ground_truth_from_json(records: list[dict]) -> list[GroundTruthBox]:
    return [
        GroundTruthBox(str(r["image_id"]), int(r["class_id"]), _box_from(r, f"ground truth {i}"))
        for i, r in enumerate(records)
    ]


def detections_to_json(dets: Iterable[Detection]) -> list[dict]:
    return [
        {"image_id": d.image_id, "class_id": d.class_id, "bbox": d.box.as_list(), "score": d.score} for d in dets
    ]


def ground_truth_to_json(gts: Iterable[GroundTruthBox]) -> list[dict]:
    return [{"image_id": g.image_id, "class_id": g.class_id, "bbox": g.box.as_list()} for g in gts]


def read_json(path: str | os.PathLike):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path: str | os.PathLike, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")
