"""Pinhole cameras, ego-frame normalization, and voxel-grid ray casting.

Extrinsics are stored in the projection direction (ego -> camera); the
camera center in ego coordinates is recovered as -R^T t when needed.
All functions here are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

DEPTH_EPS = 1e-6  # minimum depth counted as "in front of" a camera


@dataclass(frozen=True)
class SceneBounds:
    x_min: float
    y_min: float
    z_min: float
    x_max: float
    y_max: float
    z_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise ConfigError(f"degenerate scene bounds: {self}")

    @property
    def lo(self):
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def hi(self):
        return np.array([self.x_max, self.y_max, self.z_max])

    def contains(self, points):
        p = np.atleast_2d(points)
        return np.all((p >= self.lo) & (p <= self.hi), axis=1)

    def shrunk_xy(self, fraction: float) -> "SceneBounds":
        """Bounds with x/y extents scaled about their center; z untouched."""
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"shrink fraction must be in (0, 1], got {fraction}")
        cx = 0.5 * (self.x_min + self.x_max)
        cy = 0.5 * (self.y_min + self.y_max)
        hx = 0.5 * (self.x_max - self.x_min) * fraction
        hy = 0.5 * (self.y_max - self.y_min) * fraction
        return SceneBounds(cx - hx, cy - hy, self.z_min, cx + hx, cy + hy, self.z_max)

    def as_tuple(self):
        return (self.x_min, self.y_min, self.z_min, self.x_max, self.y_max, self.z_max)


@dataclass(frozen=True)
class GridSpec:
    bounds: SceneBounds
    nx: int
    ny: int
    nz: int
    voxel_size: float

    def __post_init__(self):
        for n, lo, hi, ax in (
            (self.nx, self.bounds.x_min, self.bounds.x_max, "x"),
            (self.ny, self.bounds.y_min, self.bounds.y_max, "y"),
            (self.nz, self.bounds.z_min, self.bounds.z_max, "z"),
        ):
            if n <= 0:
                raise ConfigError(f"voxel count along {ax} must be positive")
            if abs((hi - lo) - n * self.voxel_size) > 1e-9:
                raise ConfigError(
                    f"bounds extent along {ax} ({hi - lo}) != count*voxel_size ({n * self.voxel_size})"
                )

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def num_voxels(self):
        return self.nx * self.ny * self.nz

    def centers(self) -> np.ndarray:
        """All voxel centers [nx*ny*nz, 3] in raster order (z fastest)."""
        xs = self.bounds.x_min + (np.arange(self.nx) + 0.5) * self.voxel_size
        ys = self.bounds.y_min + (np.arange(self.ny) + 0.5) * self.voxel_size
        zs = self.bounds.z_min + (np.arange(self.nz) + 0.5) * self.voxel_size
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def center_of(self, flat_index) -> np.ndarray:
        idx = np.asarray(flat_index, dtype=np.int64)
        i = idx // (self.ny * self.nz)
        j = (idx // self.nz) % self.ny
        k = idx % self.nz
        ijk = np.stack([i, j, k], axis=-1)
        return self.bounds.lo + (ijk + 0.5) * self.voxel_size

    def voxel_of(self, points) -> np.ndarray:
        """Flat voxel index of each point; points must lie inside bounds."""
        p = np.atleast_2d(points)
        ijk = np.floor((p - self.bounds.lo) / self.voxel_size).astype(np.int64)
        ijk = np.clip(ijk, 0, np.array(self.shape) - 1)
        return (ijk[:, 0] * self.ny + ijk[:, 1]) * self.nz + ijk[:, 2]


@dataclass(frozen=True)
class Camera:
    K: np.ndarray  # 3x3 intrinsics
    R: np.ndarray  # 3x3 rotation, ego -> camera
    t: np.ndarray  # translation, ego -> camera
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ConfigError("camera K and R must be 3x3")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ConfigError("camera rotation is not a proper orthonormal matrix")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        if not (0 <= K[0, 2] <= self.width and 0 <= K[1, 2] <= self.height):
            raise ConfigError("principal point lies outside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in ego coordinates."""
        return -self.R.T @ self.t


def normalize_points(points, bounds: SceneBounds) -> np.ndarray:
    """Affine map of ego points into the unit cube defined by `bounds`.

    Points outside bounds are allowed (manual / beyond-range queries) and
    simply map outside [0, 1]^3.
    """
    p = np.asarray(points, dtype=np.float64)
    return (p - bounds.lo) / (bounds.hi - bounds.lo)


def project_points(points, cam: Camera):
    """Project ego points into one camera.

    Returns (uv [N,2], depth [N], hit [N]); hit requires positive depth and
    the pixel inside [0,width) x [0,height).
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pc = p @ cam.R.T + cam.t
    depth = pc[:, 2]
    safe = np.where(np.abs(depth) > DEPTH_EPS, depth, np.inf)
    u = cam.K[0, 0] * pc[:, 0] / safe + cam.K[0, 2]
    v = cam.K[1, 1] * pc[:, 1] / safe + cam.K[1, 2]
    hit = (depth > DEPTH_EPS) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), depth, hit


def project_point(p_ego, cam: Camera):
    """Single-point wrapper: returns (uv, depth, hit)."""
    uv, depth, hit = project_points(np.asarray(p_ego)[None, :], cam)
    return uv[0], float(depth[0]), bool(hit[0])


def unproject(uv, depth: float, cam: Camera) -> np.ndarray:
    """Inverse of project_point at a known positive depth."""
    x = (uv[0] - cam.K[0, 2]) * depth / cam.K[0, 0]
    y = (uv[1] - cam.K[1, 2]) * depth / cam.K[1, 1]
    pc = np.array([x, y, depth])
    return cam.R.T @ (pc - cam.t)


def hit_views(p_ego, rig) -> list:
    """Ascending indices of cameras whose frustum contains the point."""
    if not rig:
        raise ContractError("hit_views needs a non-empty rig")
    return [i for i, cam in enumerate(rig) if project_points(p_ego, cam)[2][0]]


def hit_matrix(points, rig) -> np.ndarray:
    """[N, n_cameras] boolean hit table for a batch of points."""
    p = np.atleast_2d(points)
    return np.stack([project_points(p, cam)[2] for cam in rig], axis=1)


# ---------------------------------------------------------------------------
# voxel traversal


def _ray_grid_entry(origin, direction, grid: GridSpec):
    """Parametric entry of rays into the grid box; inf when they miss."""
    lo = grid.bounds.lo
    hi = grid.bounds.hi
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / direction
        t2 = (hi - origin) / direction
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # axes with zero direction: inside slab -> always, outside -> never
    zero = direction == 0.0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=1)
    t_exit = tmax.min(axis=1)
    t_enter = np.where(t_enter <= t_exit, t_enter, np.inf)
    return t_enter


def traverse_to_targets(origin, targets, labels, grid: GridSpec, mark=None) -> np.ndarray:
    """Amanatides-Woo walk from one origin towards many target voxel centers.

    Returns a boolean [n_targets] array: True when the segment from `origin`
    to the target center enters no occupied voxel other than the target
    itself. `labels` is the [nx, ny, nz] occupancy grid (0 = empty).

    When `mark` (flat boolean buffer) is given, every voxel the segments
    traverse up to and including their first occupied voxel is flagged in
    it: the observed-region bookkeeping behind the visibility mask.
    """
    targets = np.atleast_2d(targets)
    n = len(targets)
    direction = targets - origin[None, :]
    target_cell = grid.voxel_of(targets)

    t_enter = _ray_grid_entry(np.broadcast_to(origin, (n, 3)), direction, grid)
    t0 = np.maximum(t_enter, 0.0) + 1e-12
    start = origin[None, :] + t0[:, None] * direction

    shape = np.array(grid.shape)
    cell = np.floor((start - grid.bounds.lo) / grid.voxel_size).astype(np.int64)
    cell = np.clip(cell, 0, shape - 1)

    step = np.where(direction > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = grid.bounds.lo + (cell + (step > 0)) * grid.voxel_size
        t_max = (next_bound - origin) / direction
        t_delta = grid.voxel_size / np.abs(direction)
    t_max = np.where(direction == 0.0, np.inf, t_max)
    t_delta = np.where(direction == 0.0, np.inf, t_delta)

    visible = np.zeros(n, dtype=bool)
    active = np.arange(n)
    flat = labels.reshape(-1)
    max_steps = int(shape.sum()) + 4
    for _ in range(max_steps):
        if len(active) == 0:
            break
        ci = cell[active]
        flat_idx = (ci[:, 0] * grid.ny + ci[:, 1]) * grid.nz + ci[:, 2]
        if mark is not None:
            mark[flat_idx] = True
        reached = flat_idx == target_cell[active]
        visible[active[reached]] = True
        blocked = (~reached) & (flat[flat_idx] != 0)
        keep = ~(reached | blocked)
        active = active[keep]
        if len(active) == 0:
            break
        # step every axis whose boundary crossing ties for nearest, so cells
        # the segment only touches at a corner or edge are never entered
        tm = t_max[active]
        tmin = tm.min(axis=1)
        hop = tm == tmin[:, None]
        cell[active] += np.where(hop, step[active], 0)
        t_max[active] = np.where(hop, tm + t_delta[active], tm)
        oob = np.any((cell[active] < 0) | (cell[active] >= shape), axis=1)
        active = active[~oob]
    return visible


def cast_first_hit(origin, directions, labels, grid: GridSpec):
    """March unit-direction rays until the first occupied voxel.

    Returns (hit_flat_index [R] int64 with -1 for misses, t_entry [R]),
    where t is the distance along the (unit) direction at which the ray
    entered the occupied voxel.
    """
    directions = np.atleast_2d(directions)
    n = len(directions)
    t_enter = _ray_grid_entry(np.broadcast_to(origin, (n, 3)), directions, grid)
    hit_idx = np.full(n, -1, dtype=np.int64)
    hit_t = np.full(n, np.inf)

    alive = np.isfinite(t_enter)
    t0 = np.maximum(t_enter, 0.0) + 1e-12
    start = origin[None, :] + t0[:, None] * directions
    shape = np.array(grid.shape)
    cell = np.floor((start - grid.bounds.lo) / grid.voxel_size).astype(np.int64)
    cell = np.clip(cell, 0, shape - 1)

    step = np.where(directions > 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = grid.bounds.lo + (cell + (step > 0)) * grid.voxel_size
        t_max = (next_bound - origin) / directions
        t_delta = grid.voxel_size / np.abs(directions)
    t_max = np.where(directions == 0.0, np.inf, t_max)
    t_delta = np.where(directions == 0.0, np.inf, t_delta)

    entry_t = np.maximum(t_enter, 0.0)  # t at which the current cell was entered
    active = np.nonzero(alive)[0]
    flat = labels.reshape(-1)
    max_steps = int(shape.sum()) + 4
    for _ in range(max_steps):
        if len(active) == 0:
            break
        ci = cell[active]
        flat_idx = (ci[:, 0] * grid.ny + ci[:, 1]) * grid.nz + ci[:, 2]
        occ = flat[flat_idx] != 0
        hit_rows = active[occ]
        hit_idx[hit_rows] = flat_idx[occ]
        hit_t[hit_rows] = entry_t[hit_rows]
        active = active[~occ]
        if len(active) == 0:
            break
        tm = t_max[active]
        tmin = tm.min(axis=1)
        hop = tm == tmin[:, None]
        entry_t[active] = tmin
        cell[active] += np.where(hop, step[active], 0)
        t_max[active] = np.where(hop, tm + t_delta[active], tm)
        oob = np.any((cell[active] < 0) | (cell[active] >= shape), axis=1)
        active = active[~oob]
    return hit_idx, hit_t


def visibility_mask(labels: np.ndarray, grid: GridSpec, rig) -> np.ndarray:
    """Boolean grid of voxels observable by at least one camera.

    One ray is cast per (camera, voxel) pair, from the camera center
    through the voxel's center, restricted to voxels whose centers project
    into that camera. Every voxel such a ray traverses before entering an
    occupied voxel is visible, and the first occupied voxel along the ray
    is visible as well; nothing beyond it is. Distant floor or wall voxels
    are therefore covered by the rays aimed at cells near them, exactly as
    an image observes them.
    """
    if labels.shape != grid.shape:
        raise ContractError(f"labels shape {labels.shape} does not match grid {grid.shape}")
    centers = grid.centers()
    visible = np.zeros(grid.num_voxels, dtype=bool)
    for cam in rig:
        _, _, hit = project_points(centers, cam)
        targets = np.nonzero(hit)[0]
        if len(targets) == 0:
            continue
        traverse_to_targets(cam.center, centers[targets], labels, grid, mark=visible)
    return visible.reshape(grid.shape)


# ---------------------------------------------------------------------------
# rig file format: one line per camera with
# K (9 floats row-major), R (9), t (3), width, height


def save_rig(path, rig):
    lines = [f"rig 1 {len(rig)}"]
    for cam in rig:
        nums = [*cam.K.ravel(), *cam.R.ravel(), *cam.t.ravel()]
        lines.append(" ".join(repr(float(x)) for x in nums) + f" {cam.width} {cam.height}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rig(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["rig", "1"]:
        raise ConfigError(f"unrecognized rig file header: {lines[0]!r}")
    count = int(head[2])
    rig = []
    for ln in lines[1 : 1 + count]:
        parts = ln.split()
        vals = [float(x) for x in parts[:21]]
        rig.append(
            Camera(
                K=np.array(vals[0:9]).reshape(3, 3),
                R=np.array(vals[9:18]).reshape(3, 3),
                t=np.array(vals[18:21]),
                width=int(parts[21]),
                height=int(parts[22]),
            )
        )
    return rig
