"""Point-of-interest generation: the query locations fed to the decoder.

Three kinds are supported: `standard` (voxel centers, carrying their voxel
index), `adaptive` (chosen from prediction uncertainty), and `manual`
(arbitrary user-specified locations, including beyond the trained range).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .geometry import GridSpec, SceneBounds

KINDS = ("standard", "adaptive", "manual")


@dataclass
class PoISet:
    points: np.ndarray  # [N, 3] ego meters
    kind: str
    origin_index: Optional[np.ndarray] = None  # flat voxel index, standard kind

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown PoI kind {self.kind!r}")
        if self.origin_index is not None:
            self.origin_index = np.asarray(self.origin_index, dtype=np.int64)
            if len(self.origin_index) != len(self.points):
                raise ContractError("origin_index length does not match points")

    def __len__(self):
        return len(self.points)


def grid_centers(grid: GridSpec) -> PoISet:
    """Centers of every voxel, raster order with z fastest."""
    return PoISet(grid.centers(), "standard", np.arange(grid.num_voxels, dtype=np.int64))


def perturb(pois: PoISet, radius: float = 0.1, rng: np.random.Generator | None = None) -> PoISet:
    """Independent uniform jitter in [-radius, radius] per coordinate."""
    if radius < 0:
        raise ConfigError(f"perturbation radius must be >= 0, got {radius}")
    if radius == 0:
        return PoISet(pois.points.copy(), pois.kind, pois.origin_index)
    if rng is None:
        raise ContractError("perturb with radius > 0 needs an explicit generator")
    offs = rng.uniform(-radius, radius, size=pois.points.shape)
    return PoISet(pois.points + offs, pois.kind, pois.origin_index)


def sample_training_pois(
    visible: np.ndarray, grid: GridSpec, count: int, rng: np.random.Generator
) -> PoISet:
    """Draw `count` voxel centers uniformly from the visible voxels.

    Without replacement when enough voxels are visible; with replacement
    otherwise, so the returned set always has exactly `count` points.
    """
    flat = np.asarray(visible, dtype=bool).reshape(-1)
    candidates = np.nonzero(flat)[0]
    if len(candidates) == 0:
        raise DataError("no visible voxels to sample from")
    replace = len(candidates) < count
    chosen = rng.choice(candidates, size=count, replace=replace)
    return PoISet(grid.center_of(chosen), "standard", chosen)


def manual_range(inner: SceneBounds, outer: SceneBounds, voxel_size: float) -> PoISet:
    """Voxel centers of the outer grid whose centers fall outside `inner`."""
    if not (
        inner.x_min >= outer.x_min
        and inner.y_min >= outer.y_min
        and inner.z_min >= outer.z_min
        and inner.x_max <= outer.x_max
        and inner.y_max <= outer.y_max
        and inner.z_max <= outer.z_max
        and (inner.lo > outer.lo).any() | (inner.hi < outer.hi).any()
    ):
        raise ConfigError("inner bounds must be strictly contained in outer bounds")
    nx = int(round((outer.x_max - outer.x_min) / voxel_size))
    ny = int(round((outer.y_max - outer.y_min) / voxel_size))
    nz = int(round((outer.z_max - outer.z_min) / voxel_size))
    grid = GridSpec(outer, nx, ny, nz, voxel_size)
    centers = grid.centers()
    outside = ~inner.contains(centers)
    return PoISet(centers[outside], "manual")


def select_uncertain(probs: np.ndarray, threshold: float = 0.9) -> np.ndarray:
    """Ascending indices of rows whose max probability is below threshold."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("select_uncertain rows must sum to 1")
    return np.nonzero(p.max(axis=1) < threshold)[0]


def select_top_uncertain(probs: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the `fraction` of rows with the lowest max probability.

    Ties broken by ascending row index; returned indices are ascending.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    count = int(round(fraction * len(p)))
    order = np.argsort(p.max(axis=1), kind="stable")
    return np.sort(order[:count])
