"""Pyramid vision-transformer backbone on a small numpy autodiff engine."""

from .backbone import (
    Backbone,
    BackboneConfig,
    CheckpointError,
    FeaturePyramid,
    build_backbone,
    default_config,
    forward_pyramid,
    load_checkpoint,
    load_config,
    param_count,
    parse_config,
    read_checkpoint,
    save_checkpoint,
)
from .blocks import StageConfig, normal_block, pcm, prm, pyramid_block
from .detection_eval import Box, Detection, EvalReport, GroundTruthBox, evaluate, iou
from .gradcheck import grad_check
from .serialization import ContainerError, load_tensors, read_tensors, save_tensors, write_tensors
from .tensor import Tensor, backward, build_graph, concat, matmul, no_grad, stack
from .transformer import TokenSequence, img2seq, mhsa, seq2img, vit_block

__version__ = "0.1.0"
