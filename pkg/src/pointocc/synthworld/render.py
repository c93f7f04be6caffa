"""Semantic ray-cast renderings: the stand-in for camera images.

Each camera yields an [H, W, M+2] float image: one-hot class of the first
occupied voxel hit through each pixel center, a normalized inverse-depth
channel, and a sky channel for rays that leave the grid unblocked.
"""

from __future__ import annotations

import numpy as np

from ..geometry import Camera, GridSpec, cast_first_hit
from .scenes import VoxelScene


def render_channels(num_classes: int) -> int:
    return num_classes + 2


def render_view(scene: VoxelScene, cam: Camera, num_classes: int) -> np.ndarray:
    """Ray-cast one camera; pixel rays go through pixel centers."""
    grid = scene.grid
    h, w = cam.height, cam.width
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    x = (us.ravel() - cam.K[0, 2]) / cam.K[0, 0]
    y = (vs.ravel() - cam.K[1, 2]) / cam.K[1, 1]
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs = dirs_cam @ cam.R  # rows are ego directions (R^T applied per ray)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    hit_idx, hit_t = cast_first_hit(cam.center, dirs, scene.labels, grid)

    img = np.zeros((h * w, num_classes + 2))
    hit = hit_idx >= 0
    classes = scene.labels.reshape(-1)[hit_idx[hit]].astype(np.int64)
    img[np.nonzero(hit)[0], classes - 1] = 1.0  # class c -> channel c-1
    depth = np.maximum(hit_t[hit], grid.voxel_size * 1e-3)
    img[hit, num_classes] = np.clip(grid.voxel_size / depth, 0.0, 1.0)
    img[~hit, num_classes + 1] = 1.0  # sky
    return img.reshape(h, w, num_classes + 2)


def render_views(scene: VoxelScene, rig, num_classes: int):
    """All cameras of the rig, in rig order."""
    return [render_view(scene, cam, num_classes) for cam in rig]
