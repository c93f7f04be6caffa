"""Visibility-masked confusion accumulation and mean IoU."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Confusion:
    """Per-class TP/FP/FN counters; counts only visible voxels.

    Supports merge-by-summation so shards can evaluate independently.
    """

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)
        self.visible_voxels = 0

    def merge(self, other: "Confusion") -> "Confusion":
        if other.num_classes != self.num_classes:
            raise ContractError("cannot merge confusions with different class counts")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.visible_voxels += other.visible_voxels
        return self


def accumulate(pred, gt, visible, conf: Confusion) -> Confusion:
    """Update `conf` with one grid (or flat batch) of predictions."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    v = np.asarray(visible, dtype=bool)
    if p.shape != g.shape or p.shape != v.shape:
        raise ContractError(f"shape mismatch: pred {p.shape}, gt {g.shape}, visible {v.shape}")
    p = p.reshape(-1)[v.reshape(-1)].astype(np.int64)
    g = g.reshape(-1)[v.reshape(-1)].astype(np.int64)
    m = conf.num_classes
    joint = np.bincount(g * m + p, minlength=m * m).reshape(m, m)
    diag = np.diag(joint)
    conf.tp += diag
    conf.fp += joint.sum(axis=0) - diag
    conf.fn += joint.sum(axis=1) - diag
    conf.visible_voxels += len(p)
    return conf


def miou(conf: Confusion, exclude=(0,)):
    """Mean IoU over evaluable classes.

    Classes in `exclude` and classes with a zero TP+FP+FN denominator are
    omitted from the mean; the per-class table reports them as None.
    Returns (miou, per_class list, degenerate flag); a confusion with no
    evaluable class reports miou 0.0 with the flag set.
    """
    per_class = []
    vals = []
    excluded = set(exclude)
    for c in range(conf.num_classes):
        denom = int(conf.tp[c] + conf.fp[c] + conf.fn[c])
        if c in excluded or denom == 0:
            per_class.append(None)
            continue
        iou = conf.tp[c] / denom
        per_class.append(iou)
        vals.append(iou)
    if not vals:
        return 0.0, per_class, True
    return float(np.mean(vals)), per_class, False


def format_report(
    conf: Confusion,
    class_names=None,
    exclude=(0,),
    extra=None,
):
    """Render (text_table, key_value dict) for one evaluation.

    `extra` key/values (e.g. the early-exit relative-computation statistic)
    are appended to both forms.
    """
    score, per_class, degenerate = miou(conf, exclude)
    names = class_names or [f"class_{c}" for c in range(conf.num_classes)]
    lines = [f"{'class':<14}{'IoU':>10}{'TP':>12}{'FP':>12}{'FN':>12}"]
    kv = {}
    for c in range(conf.num_classes):
        iou = per_class[c]
        iou_s = f"{iou:.6f}" if iou is not None else ("excl" if c in set(exclude) else "absent")
        lines.append(f"{names[c]:<14}{iou_s:>10}{conf.tp[c]:>12}{conf.fp[c]:>12}{conf.fn[c]:>12}")
        kv[f"iou.{names[c]}"] = f"{iou:.6f}" if iou is not None else "absent"
    lines.append(f"{'mIoU':<14}{score:>10.6f}")
    lines.append(f"visible voxels: {conf.visible_voxels}")
    if degenerate:
        lines.append("warning: no evaluable classes")
    kv["miou"] = f"{score:.6f}"
    kv["visible_voxels"] = str(conf.visible_voxels)
    kv["no_evaluable_classes"] = "1" if degenerate else "0"
    for k, v in (extra or {}).items():
        kv[k] = str(v)
        lines.append(f"{k}: {v}")
    return "\n".join(lines) + "\n", kv


def write_report(path_prefix, text, kv):
    """Write `<prefix>.txt` and a machine-readable `<prefix>.kv`."""
    with open(str(path_prefix) + ".txt", "w") as fh:
        fh.write(text)
    with open(str(path_prefix) + ".kv", "w") as fh:
        for k in kv:
            fh.write(f"{k}={kv[k]}\n")
