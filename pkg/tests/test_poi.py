import numpy as np
import pytest

from pointocc.errors import ConfigError, ContractError, DataError
from pointocc.geometry import GridSpec, SceneBounds
from pointocc.poi import (
    grid_centers,
    manual_range,
    perturb,
    sample_training_pois,
    select_top_uncertain,
    select_uncertain,
)

from conftest import rng_for

PAPER_GRID = GridSpec(SceneBounds(-40.0, -40.0, -1.0, 40.0, 40.0, 5.4), 200, 200, 16, 0.4)


def test_grid_centers_paper_grid_corners():
    pois = grid_centers(PAPER_GRID)
    assert len(pois) == 200 * 200 * 16
    assert np.allclose(pois.points[0], [-39.8, -39.8, -0.8], atol=1e-12)
    assert np.allclose(pois.points[-1], [39.8, 39.8, 5.2], atol=1e-12)


def test_grid_centers_unit_grid():
    grid = GridSpec(SceneBounds(0, 0, 0, 1, 1, 1), 1, 1, 1, 1.0)
    pois = grid_centers(grid)
    assert np.allclose(pois.points, [[0.5, 0.5, 0.5]], atol=1e-15)


def test_grid_centers_index_bijection():
    grid = GridSpec(SceneBounds(-2, -2, 0, 2, 2, 2), 8, 8, 4, 0.5)
    pois = grid_centers(grid)
    back = grid.voxel_of(pois.points)
    assert np.array_equal(back, pois.origin_index)
    assert np.allclose(grid.center_of(back), pois.points, atol=1e-12)


def test_perturb_zero_radius_identity():
    pois = grid_centers(GridSpec(SceneBounds(-1, -1, -1, 1, 1, 1), 2, 2, 2, 1.0))
    out = perturb(pois, 0.0)
    assert np.array_equal(out.points, pois.points)
    assert out.kind == pois.kind


def test_perturb_bound_and_voxel_stability():
    grid = GridSpec(SceneBounds(-2, -2, 0, 2, 2, 2), 8, 8, 4, 0.5)
    pois = grid_centers(grid)
    for trial in range(10):
        out = perturb(pois, 0.1, rng_for(trial, salt=20))
        assert np.all(np.abs(out.points - pois.points) <= 0.1)
        # radius < voxel_size/2 keeps every point in its own voxel
        assert np.array_equal(grid.voxel_of(out.points), pois.origin_index)


def test_perturb_seeded_replay():
    grid = GridSpec(SceneBounds(0, 0, 0, 3, 1, 1), 3, 1, 1, 1.0)
    pois = grid_centers(grid)
    out = perturb(pois, 0.1, np.random.default_rng(42))
    offs = np.random.default_rng(42).uniform(-0.1, 0.1, size=(3, 3))
    assert np.array_equal(out.points, pois.points + offs)


def test_perturb_negative_radius_rejected():
    pois = grid_centers(GridSpec(SceneBounds(0, 0, 0, 1, 1, 1), 1, 1, 1, 1.0))
    with pytest.raises(ConfigError):
        perturb(pois, -0.1, np.random.default_rng(0))


def test_sample_training_pois_exact_count_no_replacement():
    grid = GridSpec(SceneBounds(0, 0, 0, 4, 1, 1), 4, 1, 1, 1.0)
    visible = np.array([True, True, True, True])
    pois = sample_training_pois(visible, grid, 4, np.random.default_rng(0))
    assert sorted(pois.origin_index.tolist()) == [0, 1, 2, 3]


def test_sample_training_pois_replacement_fallback():
    grid = GridSpec(SceneBounds(0, 0, 0, 4, 1, 1), 4, 1, 1, 1.0)
    visible = np.array([False, True, False, False])
    pois = sample_training_pois(visible, grid, 3, np.random.default_rng(0))
    assert np.array_equal(pois.origin_index, [1, 1, 1])


def test_sample_training_pois_seeded_replay():
    grid = GridSpec(SceneBounds(-2, -2, 0, 2, 2, 2), 8, 8, 4, 0.5)
    rng = rng_for(0, salt=21)
    visible = rng.random(grid.num_voxels) < 0.4
    got = sample_training_pois(visible, grid, 32, np.random.default_rng(77))
    replay = np.random.default_rng(77).choice(np.nonzero(visible)[0], size=32, replace=False)
    assert np.array_equal(np.sort(got.origin_index), np.sort(replay))


def test_sample_training_pois_all_invisible():
    grid = GridSpec(SceneBounds(0, 0, 0, 2, 1, 1), 2, 1, 1, 1.0)
    with pytest.raises(DataError):
        sample_training_pois(np.zeros(2, dtype=bool), grid, 1, np.random.default_rng(0))


def test_manual_range_paper_count():
    outer = SceneBounds(-40.0, -40.0, -1.0, 40.0, 40.0, 5.4)
    inner = SceneBounds(-30.0, -30.0, -1.0, 30.0, 30.0, 5.4)
    pois = manual_range(inner, outer, 0.4)
    assert len(pois) == 200 * 200 * 16 - 150 * 150 * 16 == 280000
    assert pois.kind == "manual"


def test_manual_range_membership():
    outer = SceneBounds(-4.0, -4.0, -1.0, 4.0, 4.0, 1.0)
    inner = SceneBounds(-2.0, -2.0, -1.0, 2.0, 2.0, 1.0)
    pois = manual_range(inner, outer, 0.5)
    assert np.all(~inner.contains(pois.points))
    assert np.all(outer.contains(pois.points))


def test_manual_range_single_ring():
    outer = SceneBounds(0.0, 0.0, 0.0, 4.0, 4.0, 1.0)
    inner = SceneBounds(1.0, 1.0, 0.0, 3.0, 3.0, 1.0)
    pois = manual_range(inner, outer, 1.0)
    assert len(pois) == 16 - 4  # boundary ring of a 4x4x1 grid


def test_manual_range_rejects_non_contained():
    outer = SceneBounds(0, 0, 0, 2, 2, 1)
    inner = SceneBounds(-1, 0, 0, 1, 1, 1)
    with pytest.raises(ConfigError):
        manual_range(inner, outer, 1.0)


def test_select_uncertain_basic_rows():
    probs = np.array([[0.95, 0.05], [0.5, 0.5]])
    assert select_uncertain(probs, 0.9).tolist() == [1]


def test_select_uncertain_matches_max_scan():
    for trial in range(10):
        rng = rng_for(trial, salt=22)
        logits = rng.standard_normal((100, 5))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        got = select_uncertain(probs, 0.5).tolist()
        want = [i for i in range(100) if max(probs[i]) < 0.5]
        assert got == want


def test_select_uncertain_threshold_extremes():
    rng = rng_for(0, salt=23)
    logits = rng.standard_normal((20, 4))
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert len(select_uncertain(probs, 1.0 + 1e-9)) == 20
    assert len(select_uncertain(probs, 0.0)) == 0


def test_select_uncertain_rejects_bad_rows():
    with pytest.raises(ContractError):
        select_uncertain(np.array([[0.5, 0.4]]), 0.9)


def test_select_top_uncertain_fraction():
    probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.8, 0.2], [0.55, 0.45]])
    got = select_top_uncertain(probs, 0.5)
    assert got.tolist() == [1, 3]
    assert select_top_uncertain(probs, 1.0).tolist() == [0, 1, 2, 3]
    assert select_top_uncertain(probs, 0.0).tolist() == []
