import os

import numpy as np
import pytest

from pointocc.geometry import GridSpec, SceneBounds
from pointocc.synthworld import SceneSpec, default_rig, generate_dataset
from pointocc.synthworld.scenes import CLEAR_RADIUS


def small_scene_spec() -> SceneSpec:
    """A 16x16x4 world that keeps brute-force oracles fast."""
    bounds = SceneBounds(-4.0, -4.0, -1.0, 4.0, 4.0, 1.0)
    grid = GridSpec(bounds, 16, 16, 4, 0.5)
    return SceneSpec(grid=grid, buildings=1, poles=2, vehicles=2, pedestrians=1, vegetation=8)


def small_rig():
    return default_rig(width=32, height=24)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Three-scene dataset on the small grid, generated once per session."""
    root = tmp_path_factory.mktemp("data") / "small"
    generate_dataset(str(root), 3, seed=100, spec=small_scene_spec(), rig=small_rig())
    return str(root)


@pytest.fixture(scope="session")
def cache_dir():
    """Workspace-level cache for expensive trained artifacts."""
    path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".cache")
    os.makedirs(path, exist_ok=True)
    return path


def rng_for(trial: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(1234 + salt, spawn_key=(trial,)))
