"""Synthetic world: scenes, renderings, the conv stem, and on-disk formats."""

from .container import load_tensors, save_tensors
from .dataset import Dataset, generate_dataset
from .render import render_view, render_views
from .scenes import (
    CLASS_NAMES,
    SceneSpec,
    VoxelScene,
    default_grid,
    default_rig,
    generate_scene,
)
from .stem import build_pyramids, conv_stem, init_stem_params, stem_param_shapes

__all__ = [
    "CLASS_NAMES",
    "Dataset",
    "SceneSpec",
    "VoxelScene",
    "build_pyramids",
    "conv_stem",
    "default_grid",
    "default_rig",
    "generate_dataset",
    "generate_scene",
    "init_stem_params",
    "load_tensors",
    "render_view",
    "render_views",
    "save_tensors",
    "stem_param_shapes",
]
