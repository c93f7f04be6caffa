import numpy as np
import pytest

from pointocc.errors import ContractError
from pointocc.metrics import Confusion, accumulate, format_report, miou

from conftest import rng_for


def brute_confusion(pred, gt, visible, m):
    tp = np.zeros(m, dtype=np.int64)
    fp = np.zeros(m, dtype=np.int64)
    fn = np.zeros(m, dtype=np.int64)
    for p, g, v in zip(pred.reshape(-1), gt.reshape(-1), visible.reshape(-1)):
        if not v:
            continue
        if p == g:
            tp[g] += 1
        else:
            fp[p] += 1
            fn[g] += 1
    return tp, fp, fn


def test_accumulate_perfect_prediction():
    rng = rng_for(0, salt=40)
    gt = rng.integers(0, 4, size=(4, 4, 2))
    vis = rng.random(gt.shape) < 0.7
    conf = accumulate(gt, gt, vis, Confusion(4))
    assert conf.fp.sum() == 0 and conf.fn.sum() == 0
    for c in range(4):
        assert conf.tp[c] == np.sum((gt == c) & vis)


def test_accumulate_ignores_invisible():
    rng = rng_for(1, salt=40)
    gt = rng.integers(0, 3, size=(3, 3, 1))
    pred = rng.integers(0, 3, size=(3, 3, 1))
    conf = accumulate(pred, gt, np.zeros_like(gt, dtype=bool), Confusion(3))
    assert conf.tp.sum() == conf.fp.sum() == conf.fn.sum() == 0
    assert conf.visible_voxels == 0


def test_accumulate_matches_counting_oracle():
    for trial in range(20):
        rng = rng_for(trial, salt=41)
        gt = rng.integers(0, 5, size=(8, 8, 8))
        pred = rng.integers(0, 5, size=(8, 8, 8))
        vis = rng.random(gt.shape) < 0.6
        conf = accumulate(pred, gt, vis, Confusion(5))
        tp, fp, fn = brute_confusion(pred, gt, vis, 5)
        assert np.array_equal(conf.tp, tp)
        assert np.array_equal(conf.fp, fp)
        assert np.array_equal(conf.fn, fn)


def test_accumulate_shape_mismatch():
    with pytest.raises(ContractError):
        accumulate(np.zeros((2, 2)), np.zeros((2, 3)), np.ones((2, 2), bool), Confusion(2))


def test_accumulate_additivity():
    rng = rng_for(2, salt=41)
    gt = rng.integers(0, 4, size=64)
    pred = rng.integers(0, 4, size=64)
    vis = rng.random(64) < 0.5
    whole = accumulate(pred, gt, vis, Confusion(4))
    parts = Confusion(4)
    accumulate(pred[:32], gt[:32], vis[:32], parts)
    accumulate(pred[32:], gt[32:], vis[32:], parts)
    assert np.array_equal(whole.tp, parts.tp)
    assert np.array_equal(whole.fp, parts.fp)
    assert np.array_equal(whole.fn, parts.fn)


def test_miou_perfect_is_one():
    rng = rng_for(3, salt=41)
    gt = rng.integers(0, 4, size=200)
    conf = accumulate(gt, gt, np.ones(200, bool), Confusion(4))
    score, per_class, degenerate = miou(conf)
    assert score == 1.0 and not degenerate


def test_miou_single_class_value():
    conf = Confusion(3)
    conf.tp[1] = 1
    conf.fp[1] = 1
    conf.fn[1] = 2
    score, per_class, _ = miou(conf)
    assert abs(score - 0.25) < 1e-12
    assert per_class[0] is None and per_class[2] is None


def test_miou_empty_confusion_degenerate():
    score, _, degenerate = miou(Confusion(4))
    assert score == 0.0 and degenerate


def test_miou_excludes_empty_class():
    conf = Confusion(3)
    conf.tp[0] = 100  # the excluded empty class
    conf.tp[1] = 5
    conf.fn[1] = 5
    score, per_class, _ = miou(conf, exclude=(0,))
    assert abs(score - 0.5) < 1e-12
    assert per_class[0] is None


def test_miou_relabeling_invariance():
    for trial in range(10):
        rng = rng_for(trial, salt=42)
        m = 5
        gt = rng.integers(0, m, size=500)
        pred = rng.integers(0, m, size=500)
        vis = rng.random(500) < 0.8
        base, _, _ = miou(accumulate(pred, gt, vis, Confusion(m)), exclude=(0,))
        perm = rng.permutation(m)
        score, _, _ = miou(
            accumulate(perm[pred], perm[gt], vis, Confusion(m)),
            exclude=(int(perm[0]),),
        )
        assert abs(base - score) < 1e-12


def test_iou_bounds():
    rng = rng_for(4, salt=42)
    gt = rng.integers(0, 4, size=300)
    pred = rng.integers(0, 4, size=300)
    conf = accumulate(pred, gt, np.ones(300, bool), Confusion(4))
    _, per_class, _ = miou(conf, exclude=())
    for iou in per_class:
        if iou is not None:
            assert 0.0 <= iou <= 1.0


def test_merge_matches_joint_accumulation():
    rng = rng_for(5, salt=42)
    gt = rng.integers(0, 3, size=100)
    pred = rng.integers(0, 3, size=100)
    vis = np.ones(100, bool)
    a = accumulate(pred[:50], gt[:50], vis[:50], Confusion(3))
    b = accumulate(pred[50:], gt[50:], vis[50:], Confusion(3))
    a.merge(b)
    whole = accumulate(pred, gt, vis, Confusion(3))
    assert np.array_equal(a.tp, whole.tp) and a.visible_voxels == 100


def test_format_report_kv_contents(tmp_path):
    conf = Confusion(3)
    conf.tp[1] = 10
    conf.fn[2] = 4
    conf.visible_voxels = 14
    text, kv = format_report(conf, ["empty", "a", "b"], extra={"relative_computation": "0.9"})
    assert "mIoU" in text and "a" in text
    assert kv["miou"] == "0.500000"  # class a IoU 1.0, class b IoU 0.0
    assert kv["relative_computation"] == "0.9"
