"""Synthetic-data detection harness exercising the backbone end to end."""

from .head import ToyHeadParams, assign_targets, decode_offsets, encode_box, postprocess, toy_head_forward
from .synthetic import SyntheticScene, gen_dataset, read_dataset, write_dataset
from .train import (
    AdamW,
    Detector,
    DropPath,
    LRSchedule,
    TrainLog,
    evaluate_scenes,
    infer,
    load_detector,
    save_detector,
    train_toy,
)
