"""Procedural desk-scale scenes: the ground truth the model learns from.

A scene is a dense semantic voxel grid (0 = empty). Content is a ground
slab plus a few object archetypes placed by rejection sampling, heavily
imbalanced towards the surface class so frequency weighting matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError
from ..geometry import Camera, GridSpec, SceneBounds

# class ids
EMPTY = 0
SURFACE = 1
BUILDING = 2
POLE = 3
VEHICLE = 4
PEDESTRIAN = 5
VEGETATION = 6

CLASS_NAMES = ["empty", "surface", "building", "pole", "vehicle", "pedestrian", "vegetation"]

CLEAR_RADIUS = 1.5  # meters around the ego origin kept free of objects


def default_grid() -> GridSpec:
    bounds = SceneBounds(-10.0, -10.0, -1.0, 10.0, 10.0, 3.0)
    return GridSpec(bounds, 40, 40, 8, 0.5)


@dataclass
class SceneSpec:
    grid: GridSpec = field(default_factory=default_grid)
    num_classes: int = 6  # semantic classes, excluding empty
    buildings: int = 3
    poles: int = 6
    vehicles: int = 5
    pedestrians: int = 4
    vegetation: int = 40  # scattered voxels


@dataclass
class VoxelScene:
    labels: np.ndarray  # [nx, ny, nz] uint8
    grid: GridSpec

    def __post_init__(self):
        if self.labels.shape != self.grid.shape:
            raise DataError("scene labels do not match the grid shape")

    def histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels.reshape(-1), minlength=num_classes + 1)


def _try_place_box(labels, rng, size_vox, z0, clear_cells):
    """Pick a free footprint for a box; returns (i, j) or None."""
    nx, ny, _ = labels.shape
    sx, sy, sz = size_vox
    for _ in range(40):
        i = int(rng.integers(1, nx - sx - 1))
        j = int(rng.integers(1, ny - sy - 1))
        if np.any(clear_cells[i : i + sx, j : j + sy]):
            continue
        if np.any(labels[i : i + sx, j : j + sy, z0 : z0 + sz] != EMPTY):
            continue
        return i, j
    return None


def generate_scene(seed: int, spec: SceneSpec | None = None) -> VoxelScene:
    """Deterministic scene from a seed; retries with fewer objects on overflow."""
    spec = spec or SceneSpec()
    grid = spec.grid
    rng = np.random.default_rng(seed)
    nx, ny, nz = grid.shape
    labels = np.zeros((nx, ny, nz), dtype=np.uint8)
    labels[:, :, 0] = SURFACE  # ground slab: lowest voxel layer

    # cells blocked for object placement (keep the rig's surroundings open)
    centers_xy = grid.centers().reshape(nx, ny, nz, 3)[:, :, 0, :2]
    clear_cells = np.linalg.norm(centers_xy, axis=2) < CLEAR_RADIUS

    ground_z = 1  # first layer above the slab

    def place_all(count, size_fn, cls):
        placed = 0
        for _ in range(count):
            sx, sy, sz = size_fn()
            z0 = ground_z
            if z0 + sz > nz:
                sz = nz - z0
            at = _try_place_box(labels, rng, (sx, sy, sz), z0, clear_cells)
            if at is None:
                continue
            i, j = at
            labels[i : i + sx, j : j + sy, z0 : z0 + sz] = cls
            placed += 1
        return placed

    placed = 0
    # footprints capped so the ground slab stays > 5x any object class
    placed += place_all(
        spec.buildings, lambda: (int(rng.integers(3, 5)), int(rng.integers(3, 5)), int(rng.integers(4, 7))), BUILDING
    )
    # poles: 1x1 columns
    placed += place_all(spec.poles, lambda: (1, 1, int(rng.integers(4, 7))), POLE)
    # vehicles: low 2x1-ish boxes near the ground
    placed += place_all(
        spec.vehicles, lambda: (int(rng.integers(2, 4)), int(rng.integers(1, 3)), 1), VEHICLE
    )
    # pedestrians: 1x1x2 columns
    placed += place_all(spec.pedestrians, lambda: (1, 1, 2), PEDESTRIAN)

    # scattered vegetation voxels in the lower half of the volume
    want = spec.vegetation
    tries = 0
    placed_veg = 0
    while placed_veg < want and tries < want * 20:
        tries += 1
        i = int(rng.integers(0, nx))
        j = int(rng.integers(0, ny))
        k = int(rng.integers(ground_z, max(ground_z + 1, nz // 2 + 2)))
        if clear_cells[i, j] or labels[i, j, k] != EMPTY:
            continue
        labels[i, j, k] = VEGETATION
        placed_veg += 1

    total_objects = spec.buildings + spec.poles + spec.vehicles + spec.pedestrians
    if total_objects > 0 and placed == 0 and spec.vegetation == 0:
        raise DataError(f"could not place any object into the scene (seed {seed})")
    return VoxelScene(labels, grid)


def default_rig(grid: GridSpec | None = None, width: int = 96, height: int = 64, hfov_deg: float = 100.0):
    """Four cameras at the ego origin facing yaw 0/90/180/270 degrees."""
    fx = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    K = np.array([[fx, 0.0, width / 2.0], [0.0, fx, height / 2.0], [0.0, 0.0, 1.0]])
    rig = []
    for yaw_deg in (0.0, 90.0, 180.0, 270.0):
        yaw = np.radians(yaw_deg)
        forward = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])  # rows: camera axes in ego coords
        rig.append(Camera(K=K, R=R, t=np.zeros(3), width=width, height=height))
    return rig
