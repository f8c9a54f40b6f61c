"""
One pyramid block, branch by branch
===================================

A pyramid block downsamples by its reduction ratio ``r``. The attention
branch sees tokens produced by parallel dilated convolutions (one per
dilation rate, channel-concatenated); the convolutional branch runs three
batch-normalized 3x3 convs. Their sum goes through an FFN.
"""

import numpy as np

from pyramid_transformer.blocks import PRMParams, PyramidBlockParams, StageConfig, prm, pyramid_block
from pyramid_transformer.tensor import Tensor

rng = np.random.default_rng(1)
cfg = StageConfig(dim_in=3, dim_out=32, reduction_ratio=4, dilations=(1, 2, 3, 4), num_heads=2)
image = Tensor(rng.random((1, 3, 64, 64), dtype=np.float32))

# each dilation rate owns dim_out / len(dilations) output channels
prm_params = PRMParams(cfg, rng)
tokens_in = prm(image, cfg, prm_params)
print("PRM output", tokens_in.shape, "branch channels", cfg.branch_channels)

# larger dilations see a wider neighbourhood with the same 3x3 kernel
for d in cfg.dilations:
    print(f"  dilation {d}: receptive field {2 * d + 1}x{2 * d + 1}")

params = PyramidBlockParams(cfg, rng)
out = pyramid_block(image, cfg, params)
print("block output", out.shape)
