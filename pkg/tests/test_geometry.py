import numpy as np
import pytest

from pointocc.errors import ConfigError
from pointocc.geometry import (
    Camera,
    GridSpec,
    SceneBounds,
    hit_views,
    load_rig,
    normalize_points,
    project_point,
    project_points,
    save_rig,
    unproject,
    visibility_mask,
)
from pointocc.synthworld import default_rig

from conftest import rng_for, small_rig

PAPER_BOUNDS = SceneBounds(-40.0, -40.0, -1.0, 40.0, 40.0, 5.4)


def identity_cam(f=100.0, w=200, h=200):
    K = np.array([[f, 0, w / 2], [0, f, h / 2], [0, 0, 1.0]])
    return Camera(K=K, R=np.eye(3), t=np.zeros(3), width=w, height=h)


def test_normalize_corners_and_midpoint():
    pts = np.array([[-40, -40, -1], [0, 0, 2.2], [40, 40, 5.4]], dtype=float)
    got = normalize_points(pts, PAPER_BOUNDS)
    assert np.allclose(got[0], [0, 0, 0], atol=1e-12)
    assert np.allclose(got[1], [0.5, 0.5, 0.5], atol=1e-12)
    assert np.allclose(got[2], [1, 1, 1], atol=1e-12)


def test_normalize_is_affine():
    for trial in range(20):
        rng = rng_for(trial, salt=10)
        p = rng.uniform(-40, 40, 3)
        q = rng.uniform(-40, 40, 3)
        a = rng.uniform(0, 1)
        lhs = normalize_points(a * p + (1 - a) * q, PAPER_BOUNDS)
        rhs = a * normalize_points(p, PAPER_BOUNDS) + (1 - a) * normalize_points(q, PAPER_BOUNDS)
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_degenerate_bounds_rejected():
    with pytest.raises(ConfigError):
        SceneBounds(0, 0, 0, 1, 1, 0)


def test_project_axis_point_hits_principal_point():
    cam = identity_cam()
    uv, depth, hit = project_point(np.array([0.0, 0.0, 5.0]), cam)
    assert hit and depth == 5.0
    assert np.allclose(uv, [100.0, 100.0], atol=1e-12)


def test_project_behind_camera_misses():
    cam = identity_cam()
    _, _, hit = project_point(np.array([0.0, 0.0, -1.0]), cam)
    assert not hit


def test_project_manual_pinhole_case():
    K = np.array([[100.0, 0, 50], [0, 100.0, 50], [0, 0, 1]])
    cam = Camera(K=K, R=np.eye(3), t=np.zeros(3), width=200, height=200)
    uv, depth, hit = project_point(np.array([1.0, 2.0, 4.0]), cam)
    assert hit and depth == 4.0
    assert np.allclose(uv, [75.0, 100.0], atol=1e-12)


def test_project_unproject_roundtrip():
    rig = default_rig()
    for trial in range(30):
        rng = rng_for(trial, salt=11)
        p = rng.uniform(-8, 8, 3)
        for cam in rig:
            uv, depth, hit = project_point(p, cam)
            if hit:
                back = unproject(uv, depth, cam)
                uv2, _, _ = project_point(back, cam)
                assert np.allclose(uv, uv2, atol=1e-9)
                assert np.allclose(back, p, atol=1e-9)


def test_hit_views_empty_and_pair():
    cam = identity_cam()
    assert hit_views(np.array([0.0, 0.0, -5.0]), [cam, cam]) == []
    assert hit_views(np.array([0.0, 0.0, 5.0]), [cam, cam]) == [0, 1]


def test_hit_views_matches_per_camera_oracle():
    rig = default_rig()
    for trial in range(50):
        rng = rng_for(trial, salt=12)
        p = rng.uniform(-10, 10, 3)
        got = hit_views(p, rig)
        want = [i for i, cam in enumerate(rig) if project_point(p, cam)[2]]
        assert got == want


def test_rotation_validation():
    bad = np.eye(3)
    bad[0, 0] = -1.0  # det -1
    with pytest.raises(ConfigError):
        Camera(K=identity_cam().K, R=bad, t=np.zeros(3), width=200, height=200)


def test_rig_roundtrip(tmp_path):
    rig = default_rig()
    path = tmp_path / "rig.txt"
    save_rig(path, rig)
    back = load_rig(path)
    assert len(back) == len(rig)
    for a, b in zip(rig, back):
        assert np.array_equal(a.K, b.K) and np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
        assert (a.width, a.height) == (b.width, b.height)


# ---------------------------------------------------------------------------
# visibility


def tiny_grid(n=16, nz=16, voxel=0.5):
    half = n * voxel / 2
    zext = nz * voxel
    return GridSpec(SceneBounds(-half, -half, -1.0, half, half, -1.0 + zext), n, n, nz, voxel)


def segment_blocked_oracle(origin, target, labels, grid):
    """Exact slab-intersection brute force over every occupied voxel.

    Blocked iff some occupied voxel other than the target's cell has a
    positive-length chord with the segment entered strictly before its end.
    """
    target_cell = int(grid.voxel_of(target[None, :])[0])
    d = target - origin
    occ = np.argwhere(labels != 0)
    for i, j, k in occ:
        flat = (i * grid.ny + j) * grid.nz + k
        if flat == target_cell:
            continue
        lo = grid.bounds.lo + np.array([i, j, k]) * grid.voxel_size
        hi = lo + grid.voxel_size
        tin, tout = 0.0, 1.0
        ok = True
        for ax in range(3):
            if d[ax] == 0.0:
                if not (lo[ax] <= origin[ax] <= hi[ax]):
                    ok = False
                    break
                continue
            t1 = (lo[ax] - origin[ax]) / d[ax]
            t2 = (hi[ax] - origin[ax]) / d[ax]
            tin = max(tin, min(t1, t2))
            tout = min(tout, max(t1, t2))
        if ok and tin < tout and tin < 1.0:
            return True
    return False


def visibility_oracle_exact(labels, grid, rig):
    centers = grid.centers()
    out = np.zeros(grid.num_voxels, dtype=bool)
    for v in range(grid.num_voxels):
        for cam in rig:
            if not project_points(centers[v][None, :], cam)[2][0]:
                continue
            if not segment_blocked_oracle(cam.center, centers[v], labels, grid):
                out[v] = True
                break
    return out.reshape(grid.shape)


def visibility_oracle_march(labels, grid, rig, step_frac=0.1):
    """The dense fixed-step ray march; can skip corner-grazed blockers."""
    centers = grid.centers()
    out = np.zeros(grid.num_voxels, dtype=bool)
    shape = np.array(grid.shape)
    for v in range(grid.num_voxels):
        target = centers[v]
        tcell = v
        for cam in rig:
            if not project_points(target[None, :], cam)[2][0]:
                continue
            origin = cam.center
            d = target - origin
            n_steps = max(2, int(np.ceil(np.linalg.norm(d) / (grid.voxel_size * step_frac))))
            ts = np.linspace(0.0, 1.0, n_steps + 1)
            pts = origin[None, :] + ts[:, None] * d[None, :]
            inside = np.all((pts >= grid.bounds.lo) & (pts < grid.bounds.hi), axis=1)
            blocked = False
            for p, ok in zip(pts, inside):
                if not ok:
                    continue
                cell = int(grid.voxel_of(p[None, :])[0])
                if cell == tcell:
                    break
                if labels.reshape(-1)[cell] != 0:
                    blocked = True
                    break
            if not blocked:
                out[v] = True
                break
    return out.reshape(grid.shape)


def test_visibility_empty_scene_all_in_frustum_visible():
    grid = tiny_grid(8, 4)
    labels = np.zeros(grid.shape, dtype=np.uint8)
    rig = small_rig()
    mask = visibility_mask(labels, grid, rig)
    centers = grid.centers()
    in_frustum = np.zeros(grid.num_voxels, dtype=bool)
    for cam in rig:
        in_frustum |= project_points(centers, cam)[2]
    assert np.array_equal(mask.reshape(-1), in_frustum)


def test_visibility_single_blocker():
    grid = tiny_grid(8, 4)
    labels = np.zeros(grid.shape, dtype=np.uint8)
    cam = small_rig()[0]  # looks along +x from the origin
    # occupied voxel straight ahead; voxel behind it on the same ray
    labels[5, 4, 2] = 1
    mask = visibility_mask(labels, grid, [cam])
    assert mask[5, 4, 2]
    assert not mask[6, 4, 2]
    assert not mask[7, 4, 2]


def test_visibility_matches_exact_oracle_many_scenes():
    rig = small_rig()[:2]
    mismatches = 0
    for trial in range(50):
        rng = rng_for(trial, salt=13)
        grid = tiny_grid(8, nz=8)
        labels = (rng.random(grid.shape) < 0.08).astype(np.uint8)
        labels[4, 4, 4] = 0  # keep the camera's own voxel open
        got = visibility_mask(labels, grid, rig)
        want = visibility_oracle_exact(labels, grid, rig)
        mismatches += int(np.any(got != want))
    assert mismatches == 0


def test_visibility_close_to_march_oracle():
    # the fixed-step march can miss corner-grazing blockers, so this is a
    # near-equality check rather than exact (see exact oracle above)
    rig = small_rig()[:2]
    total = 0
    diff = 0
    for trial in range(6):
        rng = rng_for(trial, salt=14)
        grid = tiny_grid(8, nz=8)
        labels = (rng.random(grid.shape) < 0.08).astype(np.uint8)
        labels[4, 4, 4] = 0
        got = visibility_mask(labels, grid, rig)
        march = visibility_oracle_march(labels, grid, rig)
        total += got.size
        diff += int(np.sum(got != march))
    assert diff / total < 0.01


def test_visibility_monotone_in_obstacles():
    rig = small_rig()[:2]
    for trial in range(5):
        rng = rng_for(trial, salt=15)
        grid = tiny_grid(8, nz=8)
        labels = (rng.random(grid.shape) < 0.1).astype(np.uint8)
        labels[4, 4, 4] = 0
        before = visibility_mask(labels, grid, rig)
        reduced = labels.copy()
        occ = np.argwhere(reduced != 0)
        for i, j, k in occ[:: max(1, len(occ) // 5)]:
            reduced[i, j, k] = 0
        after = visibility_mask(reduced, grid, rig)
        assert np.all(after[before])  # removing blockers never hides a voxel
