"""Refining a dense volume predictor with the point decoder.

The volume baseline is deliberately weak: it mean-pools each voxel's
hit-view features at pyramid level 0 (frozen stem) and applies a small
per-voxel MLP. Refinement overwrites its probabilities inside a selected
region with a weighted blend of the point decoder's probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import losses, metrics
from .decoder import pixel_to_feature
from .diffcore import Tensor
from .errors import ConfigError, ContractError
from .geometry import GridSpec, project_points
from .synthworld import Dataset, build_pyramids, load_tensors, save_tensors


@dataclass
class RefineRegion:
    mode: str  # "box", "adaptive-threshold", "adaptive-fraction", "all"
    voxel_indices: np.ndarray  # ascending flat indices

    def __post_init__(self):
        self.voxel_indices = np.asarray(self.voxel_indices, dtype=np.int64)

    def __len__(self):
        return len(self.voxel_indices)


def box_region(grid: GridSpec, scale_m: float) -> RefineRegion:
    """Voxels whose centers lie in the ego-centered square prism of side
    `scale_m` (full height)."""
    if scale_m < 0:
        raise ConfigError("box scale must be >= 0")
    centers = grid.centers()
    half = scale_m / 2.0
    inside = (np.abs(centers[:, 0]) <= half) & (np.abs(centers[:, 1]) <= half)
    return RefineRegion("box", np.nonzero(inside)[0])


def adaptive_region(
    volume_probs: np.ndarray, threshold: float | None = None, top_fraction: float | None = None
) -> RefineRegion:
    """Low-confidence voxels of a volume prediction.

    Threshold mode selects voxels with max probability below `threshold`;
    fraction mode selects the requested share of voxels with the lowest
    max probability, ties broken by ascending voxel index.
    """
    flat = volume_probs.reshape(-1, volume_probs.shape[-1])
    conf = flat.max(axis=1)
    if (threshold is None) == (top_fraction is None):
        raise ConfigError("pass exactly one of threshold / top_fraction")
    if threshold is not None:
        return RefineRegion("adaptive-threshold", np.nonzero(conf < threshold)[0])
    if not 0.0 <= top_fraction <= 1.0:
        raise ConfigError(f"top_fraction must be in [0, 1], got {top_fraction}")
    count = int(round(top_fraction * len(conf)))
    order = np.argsort(conf, kind="stable")
    return RefineRegion("adaptive-fraction", np.sort(order[:count]))


def fuse(
    volume_probs: np.ndarray,
    point_probs: np.ndarray,
    region: RefineRegion,
    lam: float,
    on_logits: bool = False,
):
    """Blend point predictions into the volume prediction inside the region.

    Inside: (1-lam)*volume + lam*point (probabilities by default; `on_logits`
    blends log-probabilities instead and renormalizes). Outside the region
    the volume prediction is untouched. Returns (labels flat, fused probs).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"fusion weight must be in [0, 1], got {lam}")
    flat = volume_probs.reshape(-1, volume_probs.shape[-1]).copy()
    idx = region.voxel_indices
    if len(point_probs) != len(idx):
        raise ContractError(
            f"point probabilities cover {len(point_probs)} voxels, region has {len(idx)}"
        )
    if len(idx):
        if on_logits:
            eps = 1e-12
            blended = (1.0 - lam) * np.log(flat[idx] + eps) + lam * np.log(point_probs + eps)
            e = np.exp(blended - blended.max(axis=1, keepdims=True))
            flat[idx] = e / e.sum(axis=1, keepdims=True)
        else:
            flat[idx] = (1.0 - lam) * flat[idx] + lam * point_probs
    return flat.argmax(axis=1), flat


# ---------------------------------------------------------------------------
# volume baseline stub


def _pooled_features(dataset: Dataset, scene_idx: int, stem_params: dict, levels: int):
    """Mean over hit views of level-0 bilinear features at each voxel center."""
    scene, _, renders, rig = dataset.load_scene(scene_idx)
    centers = dataset.grid.centers()
    n = len(centers)
    with dc.no_grad():
        pyramids = build_pyramids(renders, stem_params, levels)
        d = pyramids[0][0].data.shape[-1]
        sums = np.zeros((n, d))
        counts = np.zeros(n)
        for cam, pyr in zip(rig, pyramids):
            uv, _, hit = project_points(centers, cam)
            idx = np.nonzero(hit)[0]
            if not len(idx):
                continue
            rc = pixel_to_feature(uv[idx], _StrideOnly(4))
            level0 = pyr[0]
            sampled = dc.bilinear_sample_maps(
                dc.reshape(level0, (1,) + level0.data.shape),
                np.zeros(len(idx), dtype=np.int64),
                Tensor(rc),
            )
            sums[idx] += sampled.data
            counts[idx] += 1.0
    return sums / np.maximum(counts, 1.0)[:, None], counts > 0


class _StrideOnly:
    """Adapter so pixel_to_feature can be reused outside a decoder config."""

    def __init__(self, stride):
        self.feature_stride = stride


def init_baseline_params(d: int, hidden: int, num_classes: int, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xB111,)))
    return {
        "vol.fc1.weight": Tensor(dc.xavier_uniform(rng, d, hidden), requires_grad=True),
        "vol.fc1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        "vol.fc2.weight": Tensor(dc.xavier_uniform(rng, hidden, num_classes + 1), requires_grad=True),
        "vol.fc2.bias": Tensor(np.zeros(num_classes + 1), requires_grad=True),
    }


def _baseline_logits(features: Tensor, params: dict) -> Tensor:
    h = dc.relu(dc.linear(features, params["vol.fc1.weight"], params["vol.fc1.bias"]))
    return dc.linear(h, params["vol.fc2.weight"], params["vol.fc2.bias"])


def volume_baseline_train(
    dataset: Dataset,
    train_indices,
    stem_params: dict,
    num_classes: int,
    seed: int,
    epochs: int = 12,
    lr: float = 1e-3,
    weight_decay: float = 0.01,
    hidden: int = 64,
):
    """Fit the per-voxel MLP on visible voxels with the standard losses.

    The stem stays frozen; pooled features are cached per scene. Returns
    the baseline parameter dict.
    """
    d = stem_params["stem.conv2.bias"].data.shape[0]
    params = init_baseline_params(d, hidden, num_classes, seed)
    state = dc.AdamWState()
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xF00D,)))

    cache = {}
    counts = np.zeros(num_classes + 1, dtype=np.int64)
    for i in train_indices:
        feats, _ = _pooled_features(dataset, i, stem_params, levels=1)
        scene, visible, _, _ = dataset.load_scene(i)
        vis = visible.reshape(-1)
        cache[i] = (feats[vis], scene.labels.reshape(-1)[vis])
        counts += np.bincount(cache[i][1], minlength=num_classes + 1)
    weights = losses.class_weights(counts)

    order_pool = list(train_indices)
    for _ in range(epochs):
        for oi in rng.permutation(len(order_pool)):
            feats, labels = cache[order_pool[int(oi)]]
            logits = _baseline_logits(Tensor(feats), params)
            loss = losses.total_loss(logits, labels, weights)
            for p in params.values():
                p.zero_grad()
            dc.backward(loss)
            dc.adamw_step(params, state, lr=lr, weight_decay=weight_decay)
    return params


def volume_baseline_infer(
    dataset: Dataset, scene_idx: int, stem_params: dict, baseline_params: dict
) -> np.ndarray:
    """Per-voxel class distributions [nvox, M+1]; rows sum to one."""
    feats, _ = _pooled_features(dataset, scene_idx, stem_params, levels=1)
    with dc.no_grad():
        logits = _baseline_logits(Tensor(feats), baseline_params)
        probs = dc.softmax(logits).data
    return probs


def save_baseline(path, baseline_params: dict, stem_params: dict, num_classes: int):
    tensors = {f"param.{k}": v.data for k, v in baseline_params.items()}
    for k, v in stem_params.items():
        if k.startswith("stem."):
            tensors[f"param.{k}"] = v.data
    save_tensors(path, tensors, meta={"kind": "volume-baseline", "classes": str(num_classes)})


def load_baseline(path):
    tensors, meta = load_tensors(path, with_meta=True)
    if meta.get("kind") != "volume-baseline":
        raise ContractError(f"{path} is not a volume-baseline checkpoint")
    baseline = {}
    stem = {}
    for k, v in tensors.items():
        name = k[len("param.") :]
        if name.startswith("vol."):
            baseline[name] = Tensor(v, requires_grad=True)
        else:
            stem[name] = Tensor(v)
    return baseline, stem, int(meta["classes"])


def evaluate_fused(
    dataset: Dataset,
    scene_indices,
    volume_probs_fn,
    point_probs_fn,
    region: RefineRegion,
    lam: float,
    num_classes: int,
    on_logits: bool = False,
):
    """Confusions for baseline-only, point-only and fused predictions."""
    conf_base = metrics.Confusion(num_classes + 1)
    conf_point = metrics.Confusion(num_classes + 1)
    conf_fused = metrics.Confusion(num_classes + 1)
    for i in scene_indices:
        scene, visible, _, _ = dataset.load_scene(i)
        vis = visible.reshape(-1)
        gt = scene.labels.reshape(-1)
        vprobs = volume_probs_fn(i)
        pprobs_full = point_probs_fn(i)
        metrics.accumulate(vprobs.argmax(axis=1), gt, vis, conf_base)
        metrics.accumulate(pprobs_full.argmax(axis=1), gt, vis, conf_point)
        fused_labels, _ = fuse(vprobs, pprobs_full[region.voxel_indices], region, lam, on_logits)
        metrics.accumulate(fused_labels, gt, vis, conf_fused)
    return conf_base, conf_point, conf_fused
