"""
Feature pyramid of the backbone
===============================

The four stages reduce resolution by 4, 2, 2 and 2, so the outputs sit at
strides 4, 8, 16 and 32. A fixed class token joins at stage 3.
"""

import numpy as np

from pyramid_transformer.backbone import build_backbone, default_config, forward_pyramid, param_count
from pyramid_transformer.tensor import no_grad

# narrow copy of the default layout so the demo runs in a second or two
cfg = default_config(dims=(16, 32, 48, 64), num_heads=(1, 2, 2, 4), nb_depths=(1, 1, 1, 1))
model = build_backbone(cfg)
print("parameters:", param_count(model))
print("full default config parameters:", param_count(build_backbone(default_config())))

for size in (128, 256):
    with no_grad():
        pyr = forward_pyramid(model, np.zeros((1, 3, size, size), np.float32))
    shapes = ", ".join(f"F{i + 1} {f.shape[1:]}" for i, f in enumerate(pyr.features))
    print(f"{size}px -> {shapes}; class token {pyr.class_token_out.shape}")
