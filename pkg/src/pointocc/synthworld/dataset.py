"""On-disk dataset layout.

    root/
      dataset.json                  top-level manifest
      scene_0000/
        labels.ospt                 u8 [nx, ny, nz]
        visible.ospt                u8 [nx, ny, nz]
        render_cam0.ospt ...        f64 [H, W, M+2]
        rig.txt
        meta.json
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import DataError
from ..geometry import GridSpec, SceneBounds, load_rig, save_rig, visibility_mask
from .container import load_tensors, save_tensors
from .render import render_views
from .scenes import CLASS_NAMES, SceneSpec, VoxelScene, default_grid, default_rig, generate_scene

DATASET_VERSION = 1


def _grid_to_dict(grid: GridSpec):
    return {
        "bounds": list(grid.bounds.as_tuple()),
        "nx": grid.nx,
        "ny": grid.ny,
        "nz": grid.nz,
        "voxel_size": grid.voxel_size,
    }


def _grid_from_dict(d) -> GridSpec:
    return GridSpec(SceneBounds(*d["bounds"]), d["nx"], d["ny"], d["nz"], d["voxel_size"])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def generate_dataset(out_dir, num_scenes: int, seed: int, spec: SceneSpec | None = None, rig=None):
    """Write `num_scenes` scenes; scene i uses seed `seed + i`."""
    spec = spec or SceneSpec()
    rig = rig or default_rig(spec.grid)
    os.makedirs(out_dir, exist_ok=True)
    for i in range(num_scenes):
        scene_seed = seed + i
        scene = generate_scene(scene_seed, spec)
        visible = visibility_mask(scene.labels, spec.grid, rig)
        renders = render_views(scene, rig, spec.num_classes)
        sdir = os.path.join(out_dir, f"scene_{i:04d}")
        os.makedirs(sdir, exist_ok=True)
        save_tensors(os.path.join(sdir, "labels.ospt"), {"labels": scene.labels})
        save_tensors(os.path.join(sdir, "visible.ospt"), {"visible": visible.astype(np.uint8)})
        for c, img in enumerate(renders):
            save_tensors(os.path.join(sdir, f"render_cam{c}.ospt"), {"render": img})
        save_rig(os.path.join(sdir, "rig.txt"), rig)
        hist = scene.histogram(spec.num_classes)
        _write_json(
            os.path.join(sdir, "meta.json"),
            {
                "seed": scene_seed,
                "histogram": hist.tolist(),
                "visible_voxels": int(visible.sum()),
            },
        )
    _write_json(
        os.path.join(out_dir, "dataset.json"),
        {
            "version": DATASET_VERSION,
            "seed": seed,
            "scenes": num_scenes,
            "grid": _grid_to_dict(spec.grid),
            "num_classes": spec.num_classes,
            "class_names": CLASS_NAMES[: spec.num_classes + 1],
            "cameras": len(rig),
            "render_channels": spec.num_classes + 2,
        },
    )


class Dataset:
    """Read access to a generated dataset directory, with a RAM cache."""

    def __init__(self, root):
        self.root = str(root)
        manifest_path = os.path.join(self.root, "dataset.json")
        if not os.path.exists(manifest_path):
            raise DataError(f"{self.root}: no dataset.json manifest found")
        with open(manifest_path) as fh:
            self.manifest = json.load(fh)
        if self.manifest.get("version") != DATASET_VERSION:
            raise DataError(f"{self.root}: unsupported dataset version")
        self.grid = _grid_from_dict(self.manifest["grid"])
        self.num_classes = self.manifest["num_classes"]
        self.num_scenes = self.manifest["scenes"]
        self.class_names = self.manifest.get(
            "class_names", CLASS_NAMES[: self.num_classes + 1]
        )
        self._cache = {}

    def scene_dir(self, i: int) -> str:
        return os.path.join(self.root, f"scene_{i:04d}")

    def load_scene(self, i: int):
        """Returns (VoxelScene, visible bool grid, renderings list, rig)."""
        if i in self._cache:
            return self._cache[i]
        sdir = self.scene_dir(i)
        labels = load_tensors(os.path.join(sdir, "labels.ospt"))["labels"]
        visible = load_tensors(os.path.join(sdir, "visible.ospt"))["visible"].astype(bool)
        rig = load_rig(os.path.join(sdir, "rig.txt"))
        renders = [
            load_tensors(os.path.join(sdir, f"render_cam{c}.ospt"))["render"]
            for c in range(len(rig))
        ]
        out = (VoxelScene(labels, self.grid), visible, renders, rig)
        self._cache[i] = out
        return out
