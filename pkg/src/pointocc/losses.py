"""Training objective: class-weighted cross-entropy plus dice.

Labels are integers in [0, M] where 0 is the empty class; empty is
supervised like any other class here and only excluded at evaluation time.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .errors import ContractError, DataError

WEIGHT_EPS = 1e-3
DICE_EPS = 1e-6


def class_weights(counts) -> np.ndarray:
    """Inverse-log-frequency weights from per-class voxel counts.

    w_c = 1 / log(N_c + eps) on raw counts; classes absent from the
    training set get the largest finite weight seen among present classes.
    All returned weights are finite and positive.
    """
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise DataError("class counts must be non-negative")
    if c.sum() <= 0:
        raise DataError("class counts are all zero")
    with np.errstate(divide="ignore"):
        w = 1.0 / np.log(c + WEIGHT_EPS)
    present = (c > 0) & (w > 0) & np.isfinite(w)
    if not present.any():
        raise DataError("no class has a usable weight (all counts too small)")
    cap = w[present].max()
    w = np.where(present, w, cap)
    return w


def weighted_ce(logits: dc.Tensor, labels, weights, plain_sum: bool = False) -> dc.Tensor:
    """Class-weighted cross-entropy over a batch of points.

    Weighted-mean normalization by default (divide by the summed weights of
    the batch labels), which makes the loss scale invariant to both batch
    composition and a global rescaling of the weights. `plain_sum` switches
    to the unnormalized sum.
    """
    y = np.asarray(labels, dtype=np.int64)
    n, classes = logits.data.shape
    if len(y) != n:
        raise ContractError(f"{len(y)} labels for {n} logit rows")
    if y.min(initial=0) < 0 or y.max(initial=0) >= classes:
        raise DataError(f"labels must lie in [0, {classes - 1}]")
    w = np.asarray(weights, dtype=np.float64)
    wy = w[y]
    logp = dc.log_softmax(logits)
    picked = dc.select_per_row(logp, y)
    total = dc.tsum(dc.mul(picked, dc.Tensor(wy)))
    if plain_sum:
        return dc.neg(total)
    return dc.neg(total) * (1.0 / wy.sum())


def dice_loss(probs: dc.Tensor, labels, binary: bool = False) -> dc.Tensor:
    """Macro dice over the classes present in `labels`.

    Per class c: 1 - 2*sum(p_i g_i) / (sum(p_i^2) + sum(g_i^2) + eps) with
    g the one-hot ground truth. `binary` collapses to occupied-vs-empty.
    """
    y = np.asarray(labels, dtype=np.int64)
    n, classes = probs.data.shape
    sums = probs.data.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ContractError("dice_loss expects probability rows summing to 1")
    if binary:
        # p(occupied) = 1 - p(empty); labels collapse to {0, 1}
        p_occ = dc.Tensor(np.ones(n)) - dc.reshape(dc.take(probs, [0], axis=1), (n,))
        g = (y != 0).astype(np.float64)
        inter = dc.tsum(dc.mul(p_occ, dc.Tensor(g)))
        denom = dc.tsum(dc.mul(p_occ, p_occ)) + float(g.sum() + DICE_EPS)
        return dc.Tensor(np.array(1.0)) - 2.0 * inter / denom
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), y] = 1.0
    g = dc.Tensor(onehot)
    inter = dc.tsum(dc.mul(probs, g), axis=0)  # [classes]
    psq = dc.tsum(dc.mul(probs, probs), axis=0)
    gsq = onehot.sum(axis=0)
    dice_c = dc.Tensor(np.ones(classes)) - 2.0 * inter / (psq + dc.Tensor(gsq + DICE_EPS))
    present = np.zeros(classes)
    present[np.unique(y)] = 1.0
    return dc.tsum(dc.mul(dice_c, dc.Tensor(present))) * (1.0 / present.sum())


def total_loss(
    logits: dc.Tensor, labels, weights, use_dice: bool = True, binary_dice: bool = False
) -> dc.Tensor:
    """weighted_ce + dice; dice can be ablated away with `use_dice=False`."""
    ce = weighted_ce(logits, labels, weights)
    if not use_dice:
        return ce
    return ce + dice_loss(dc.softmax(logits), labels, binary=binary_dice)
