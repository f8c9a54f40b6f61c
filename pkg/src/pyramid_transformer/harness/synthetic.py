"""Deterministic synthetic traffic-sign scenes.

Each scene is a textured noise background with 0-4 flat-colored signs. A sign
class is a (shape, color) pair. Every scene draws from its own RNG stream,
keyed by ``(seed, scene index)``, so scenes can be generated in any order or
in parallel with identical results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..detection_eval import (
    Box,
    GroundTruthBox,
    ground_truth_from_json,
    ground_truth_to_json,
    read_json,
    write_json,
)
from ..serialization import load_tensors, save_tensors

SHAPES = ("circle", "triangle", "inverted_triangle", "octagon", "square", "diamond")
COLORS = np.array(
    [
        [0.85, 0.10, 0.10],  # red
        [0.10, 0.25, 0.85],  # blue
        [0.95, 0.80, 0.10],  # yellow
        [0.10, 0.65, 0.20],  # green
        [0.95, 0.95, 0.95],  # white
        [0.95, 0.50, 0.05],  # orange
        [0.55, 0.15, 0.70],  # purple
        [0.10, 0.75, 0.80],  # cyan
    ],
    dtype=np.float32,
)
MAX_CLASSES = 43
MIN_SIGN, MAX_SIGN = 8, 64
MAX_SIGNS = 4


@dataclass
class SyntheticScene:
    scene_id: str
    image: np.ndarray  # [3, H, W] float32 in [0, 1]
    annotations: list[GroundTruthBox] = field(default_factory=list)


def class_appearance(class_id: int) -> tuple[str, np.ndarray]:
    """(shape, RGB) for a class; distinct pairs for every class below 48."""
    shape = SHAPES[class_id % len(SHAPES)]
    color = COLORS[(class_id + class_id // len(SHAPES)) % len(COLORS)]
    return shape, color


def shape_mask(shape: str, size: int) -> np.ndarray:
    c = (np.arange(size, dtype=np.float64) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(c, c, indexing="ij")
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "triangle":
        return (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "inverted_triangle":
        return np.abs(u) <= (1.0 - v) / 2.0
    if shape == "octagon":
        return (np.abs(u) + np.abs(v)) <= 1.41
    if shape == "square":
        return (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
    if shape == "diamond":
        return (np.abs(u) + np.abs(v)) <= 1.0
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    cells = max(2, size // 16)
    coarse = rng.random((3, cells, cells)).astype(np.float32)
    rep = -(-size // cells)
    smooth = np.repeat(np.repeat(coarse, rep, axis=1), rep, axis=2)[:, :size, :size]
    base = 0.25 + 0.5 * rng.random(3).astype(np.float32)[:, None, None]
    img = 0.5 * base + 0.3 * smooth + 0.08 * rng.standard_normal((3, size, size)).astype(np.float32)
    return img


def _overlaps(box: tuple[int, int, int, int], others: list[tuple[int, int, int, int]]) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < b[2] and b[0] < x2 and y1 < b[3] and b[1] < y2 for b in others)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def make_scene(seed: int, index: int, image_size: int, num_classes: int) -> SyntheticScene:
    rng = scene_rng(seed, index)
    scene_id = f"s{seed}_{index:05d}"
    img = _background(rng, image_size)
    n_signs = int(rng.integers(0, MAX_SIGNS + 1))
    max_side = min(MAX_SIGN, image_size)
    placed: list[tuple[int, int, int, int]] = []
    annotations = []
    for _ in range(n_signs):
        class_id = int(rng.integers(0, num_classes))
        side = int(rng.integers(MIN_SIGN, max_side + 1))
        brightness = float(rng.uniform(0.7, 1.15))
        for _attempt in range(20):
            x0 = int(rng.integers(0, image_size - side + 1))
            y0 = int(rng.integers(0, image_size - side + 1))
            box = (x0, y0, x0 + side, y0 + side)
            if not _overlaps(box, placed):
                break
        else:
            continue
        shape, color = class_appearance(class_id)
        mask = shape_mask(shape, side)
        patch = img[:, y0 : y0 + side, x0 : x0 + side]
        fill = np.clip(color * brightness, 0.0, 1.0)[:, None, None]
        patch[:, mask] = np.broadcast_to(fill, (3, side, side))[:, mask]
        placed.append(box)
        annotations.append(GroundTruthBox(scene_id, class_id, Box(*map(float, box))))
    return SyntheticScene(scene_id, np.clip(img, 0.0, 1.0).astype(np.float32), annotations)


def gen_dataset(seed: int, n_scenes: int, image_size: int = 256, num_classes: int = 4) -> list[SyntheticScene]:
    if image_size < 32 or image_size % 32:
        raise ValueError(f"image_size must be a positive multiple of 32, got {image_size}")
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must be in [2, {MAX_CLASSES}], got {num_classes}")
    if n_scenes < 0:
        raise ValueError(f"n_scenes must be non-negative, got {n_scenes}")
    return [make_scene(seed, i, image_size, num_classes) for i in range(n_scenes)]


def write_dataset(directory: str | os.PathLike, scenes: list[SyntheticScene]) -> None:
    """``scenes/<id>.pytf`` (tensor ``image``) plus ``annotations.json``."""
    root = Path(directory)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        save_tensors(root / "scenes" / f"{scene.scene_id}.pytf", {"image": scene.image})
    write_json(root / "annotations.json", ground_truth_to_json(a for s in scenes for a in s.annotations))


def read_dataset(directory: str | os.PathLike) -> list[SyntheticScene]:
    root = Path(directory)
    scene_dir = root / "scenes"
    if not scene_dir.is_dir():
        raise FileNotFoundError(f"{scene_dir} not found")
    gts = ground_truth_from_json(read_json(root / "annotations.json"))
    by_image: dict[str, list[GroundTruthBox]] = {}
    for g in gts:
        by_image.setdefault(g.image_id, []).append(g)
    scenes = []
    for path in sorted(scene_dir.glob("*.pytf")):
        _, tensors = load_tensors(path)
        scenes.append(SyntheticScene(path.stem, tensors["image"], by_image.pop(path.stem, [])))
    if by_image:
        raise ValueError(f"annotations reference missing scenes: {sorted(by_image)[:5]}")
    return scenes
