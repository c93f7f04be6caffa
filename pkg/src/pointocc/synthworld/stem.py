"""Trainable convolutional stem turning renderings into feature pyramids.

Two stride-2 convolutions lift the rendering to width `d` at quarter
resolution (pyramid level 0); further levels are 2x average pools.
"""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from ..errors import ConfigError

STEM_MID = 32
KERNEL = 3


def stem_param_shapes(in_channels: int, d: int):
    return {
        "stem.conv1.weight": (KERNEL, KERNEL, in_channels, STEM_MID),
        "stem.conv1.bias": (STEM_MID,),
        "stem.conv2.weight": (KERNEL, KERNEL, STEM_MID, d),
        "stem.conv2.bias": (d,),
    }


def init_stem_params(in_channels: int, d: int, seed_fn) -> dict:
    """Named stem tensors; `seed_fn(name)` returns a per-tensor generator."""
    params = {}
    for name, shape in stem_param_shapes(in_channels, d).items():
        if name.endswith(".bias"):
            params[name] = dc.Tensor(np.zeros(shape), requires_grad=True)
        else:
            kh, kw, cin, cout = shape
            fan_in = kh * kw * cin
            rng = seed_fn(name)
            params[name] = dc.Tensor(
                dc.xavier_uniform(rng, fan_in, cout, shape=shape), requires_grad=True
            )
    return params


def conv_stem(rendering: np.ndarray, params: dict, levels: int):
    """One camera's rendering -> list of `levels` feature-map tensors.

    Level l has extents ceil(H/4/2^l) x ceil(W/4/2^l) and shared width d.
    """
    h, w, _ = rendering.shape
    if h < 4 or w < 4:
        raise ConfigError(f"rendering {h}x{w} too small for two stride-2 convolutions")
    x = dc.Tensor(rendering)
    x = dc.relu(dc.conv2d(x, params["stem.conv1.weight"], params["stem.conv1.bias"], stride=2))
    x = dc.relu(dc.conv2d(x, params["stem.conv2.weight"], params["stem.conv2.bias"], stride=2))
    pyramid = [x]
    for _ in range(1, levels):
        pyramid.append(dc.avg_pool2(pyramid[-1]))
    return pyramid


def build_pyramids(renderings, params: dict, levels: int):
    """Per-camera pyramids for a whole rig."""
    return [conv_stem(r, params, levels) for r in renderings]
