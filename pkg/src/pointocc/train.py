"""Training loop, evaluation helpers, checkpointing, gradient verification."""

from __future__ import annotations

import ast
import json
import time
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import losses, metrics, poi
from .decoder import (
    DecoderConfig,
    decode,
    deformable_attention,
    group_point_cross_attention,
    init_decoder_params,
    occupancy_head,
    point_cross_attention,
    position_encode,
    prepare_value_maps,
)
from .diffcore import Tensor
from .errors import ConfigError, DataError, NumericError, VerificationError
from .geometry import SceneBounds
from .synthworld import Dataset, build_pyramids, init_stem_params, load_tensors, save_tensors


@dataclass
class TrainConfig:
    epochs: int = 24
    scenes_per_step: int = 1
    k_points: int = 2048
    lr: float = 2e-4
    stem_lr_mult: float = 0.1
    weight_decay: float = 0.01
    num_layers: int = 3
    levels: int = 2
    group_size: int = 4
    heads: int = 4
    d: int = 64
    num_samples: int = 8
    perturb_radius: float = 0.1
    use_dice: bool = True
    seed: int = 0
    val_scenes: int = 16
    inner_fraction: float = 1.0  # restrict training supervision to an inner x/y box
    eval_batch: int = 4096

    def __post_init__(self):
        if self.lr <= 0 or self.stem_lr_mult <= 0:
            raise ConfigError("learning rates must be positive")
        if self.k_points < 1 or self.epochs < 1:
            raise ConfigError("epochs and point count must be positive")

    def decoder_config(self, num_classes: int) -> DecoderConfig:
        return DecoderConfig(
            d=self.d,
            heads=self.heads,
            levels=self.levels,
            num_layers=self.num_layers,
            num_samples=self.num_samples,
            group_size=self.group_size,
            num_classes=num_classes,
        )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, cfg: DecoderConfig, bounds: SceneBounds, state=None, extra=None):
    """All parameters plus optimizer moments and config in one container."""
    tensors = {f"param.{k}": v.data for k, v in params.items()}
    if state is not None:
        for k in state.m:
            tensors[f"adam.m.{k}"] = state.m[k]
            tensors[f"adam.v.{k}"] = state.v[k]
        tensors["adam.step"] = np.array([state.step], dtype=np.uint32)
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.asarray(v)
    meta = {f"cfg.{k}": repr(v) for k, v in asdict(cfg).items()}
    meta["bounds"] = ",".join(repr(float(b)) for b in bounds.as_tuple())
    save_tensors(path, tensors, meta=meta)


def load_checkpoint(path):
    """Returns (params, DecoderConfig, bounds, extra dict)."""
    tensors, meta = load_tensors(path, with_meta=True)
    params = {}
    extra = {}
    for k, v in tensors.items():
        if k.startswith("param."):
            params[k[len("param.") :]] = Tensor(v, requires_grad=True)
        elif k.startswith("extra."):
            extra[k[len("extra.") :]] = v
    cfg_kwargs = {}
    for k, v in meta.items():
        if k.startswith("cfg."):
            cfg_kwargs[k[len("cfg.") :]] = ast.literal_eval(v)
    cfg = DecoderConfig(**cfg_kwargs)
    bounds = SceneBounds(*(float(x) for x in meta["bounds"].split(",")))
    return params, cfg, bounds, extra


# ---------------------------------------------------------------------------
# evaluation


def inner_region_mask(dataset: Dataset, fraction: float) -> np.ndarray:
    """Flat boolean mask of voxels whose centers lie in the inner x/y box."""
    if fraction >= 1.0:
        return np.ones(dataset.grid.num_voxels, dtype=bool)
    inner = dataset.grid.bounds.shrunk_xy(fraction)
    return inner.contains(dataset.grid.centers())


def predict_grid(dataset, scene_idx, params, cfg, bounds, stem_params,
                 mode="full", threshold=None, eval_batch=4096):
    """Predicted labels for every voxel of one scene's grid.

    Returns (pred flat labels [nvox], probs [nvox, M+1], DecodeStats-like
    tally dict). Runs without gradient recording.
    """
    scene, visible, renders, rig = dataset.load_scene(scene_idx)
    centers = dataset.grid.centers()
    nvox = len(centers)
    probs = np.zeros((nvox, cfg.num_classes + 1))
    executed = 0
    total = 0
    with dc.no_grad():
        pyramids = build_pyramids(renders, stem_params, cfg.levels)
        for start in range(0, nvox, eval_batch):
            chunk = centers[start : start + eval_batch]
            logits, stats = decode(
                chunk, rig, pyramids, params, cfg, bounds, mode=mode, threshold=threshold
            )
            probs[start : start + eval_batch] = dc.softmax(logits).data
            executed += stats.executed
            total += stats.total
    pred = probs.argmax(axis=1)
    return pred, probs, {"executed": executed, "total": total}


def evaluate(dataset, scene_indices, params, cfg, bounds, stem_params,
             mode="full", threshold=None, region_mask=None, eval_batch=4096):
    """Visibility-masked confusion over a set of scenes.

    Only voxels that can enter the confusion (visible, inside the optional
    `region_mask`) are decoded. Returns (Confusion, relative_computation).
    """
    conf = metrics.Confusion(cfg.num_classes + 1)
    centers = dataset.grid.centers()
    executed = 0
    total = 0
    for i in scene_indices:
        scene, visible, renders, rig = dataset.load_scene(i)
        vis = visible.reshape(-1)
        if region_mask is not None:
            vis = vis & region_mask
        idx = np.nonzero(vis)[0]
        if len(idx) == 0:
            continue
        pts = centers[idx]
        gt = scene.labels.reshape(-1)[idx]
        pred = np.zeros(len(idx), dtype=np.int64)
        with dc.no_grad():
            pyramids = build_pyramids(renders, stem_params, cfg.levels)
            for start in range(0, len(idx), eval_batch):
                chunk = pts[start : start + eval_batch]
                logits, stats = decode(
                    chunk, rig, pyramids, params, cfg, bounds, mode=mode, threshold=threshold
                )
                pred[start : start + eval_batch] = logits.data.argmax(axis=1)
                executed += stats.executed
                total += stats.total
        metrics.accumulate(pred, gt, np.ones(len(idx), dtype=bool), conf)
    rel = executed / total if total else 1.0
    return conf, rel


def majority_class(dataset: Dataset, scene_indices, region_mask=None) -> tuple[int, np.ndarray]:
    """Most frequent class over visible voxels, plus the full count vector."""
    counts = np.zeros(dataset.num_classes + 1, dtype=np.int64)
    for i in scene_indices:
        scene, visible, _, _ = dataset.load_scene(i)
        vis = visible.reshape(-1)
        if region_mask is not None:
            vis = vis & region_mask
        labels = scene.labels.reshape(-1)[vis]
        counts += np.bincount(labels, minlength=dataset.num_classes + 1)
    return int(counts.argmax()), counts


def evaluate_constant(dataset, scene_indices, label: int, region_mask=None):
    """Confusion of the predictor that answers `label` everywhere."""
    conf = metrics.Confusion(dataset.num_classes + 1)
    for i in scene_indices:
        scene, visible, _, _ = dataset.load_scene(i)
        vis = visible.reshape(-1)
        if region_mask is not None:
            vis = vis & region_mask
        pred = np.full(dataset.grid.num_voxels, label, dtype=np.int64)
        metrics.accumulate(pred, scene.labels.reshape(-1), vis, conf)
    return conf


# ---------------------------------------------------------------------------
# training


def split_scenes(dataset: Dataset, val_scenes: int):
    if dataset.num_scenes <= val_scenes:
        raise DataError(
            f"dataset has {dataset.num_scenes} scenes, cannot hold out {val_scenes} for validation"
        )
    train_idx = list(range(dataset.num_scenes - val_scenes))
    val_idx = list(range(dataset.num_scenes - val_scenes, dataset.num_scenes))
    return train_idx, val_idx


def init_all_params(cfg: DecoderConfig, in_channels: int, seed: int) -> dict:
    from .decoder import _seed_fn

    params = init_decoder_params(cfg, seed)
    params.update(init_stem_params(in_channels, cfg.d, _seed_fn(seed)))
    return params


def train(config: TrainConfig, dataset: Dataset, out_ckpt, log_path=None):
    """Train on the dataset's leading scenes, validate on the trailing ones.

    Per step: sample visible voxel centers, perturb, decode in full mode,
    total loss, backward, AdamW with the stem at a reduced rate. The
    checkpoint with the best validation mIoU wins. Returns a history dict.
    """
    cfg = config.decoder_config(dataset.num_classes)
    train_idx, val_idx = split_scenes(dataset, config.val_scenes)
    region = inner_region_mask(dataset, config.inner_fraction)
    bounds = (
        dataset.grid.bounds
        if config.inner_fraction >= 1.0
        else dataset.grid.bounds.shrunk_xy(config.inner_fraction)
    )

    _, counts = majority_class(dataset, train_idx, region_mask=region)
    weights = losses.class_weights(counts)

    in_channels = dataset.manifest["render_channels"]
    params = init_all_params(cfg, in_channels, config.seed)
    state = dc.AdamWState()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0xD47A,)))

    log_lines = []

    def log(line):
        log_lines.append(line)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")

    best_miou = -1.0
    history = {"epoch_loss": [], "train_miou": [], "val_miou": []}
    step = 0
    t_start = time.monotonic()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        train_conf = metrics.Confusion(cfg.num_classes + 1)
        for oi in order:
            si = train_idx[int(oi)]
            scene, visible, renders, rig = dataset.load_scene(si)
            vis = visible.reshape(-1) & region
            pois = poi.sample_training_pois(vis, dataset.grid, config.k_points, rng)
            labels = scene.labels.reshape(-1)[pois.origin_index]
            if config.perturb_radius > 0:
                pois = poi.perturb(pois, config.perturb_radius, rng)

            pyramids = build_pyramids(renders, params, cfg.levels)
            logits, _ = decode(pois.points, rig, pyramids, params, cfg, bounds, mode="full")
            loss = losses.total_loss(logits, labels, weights, use_dice=config.use_dice)
            lv = float(loss.data)
            if not np.isfinite(lv):
                save_checkpoint(out_ckpt, params, cfg, bounds, state, _ckpt_extra(weights, counts, config))
                raise NumericError(f"loss diverged at epoch {epoch} step {step}")
            for p in params.values():
                p.zero_grad()
            dc.backward(loss)
            dc.adamw_step(
                params,
                state,
                lr=config.lr,
                weight_decay=config.weight_decay,
                lr_scales={"stem.": config.stem_lr_mult},
            )
            epoch_loss += lv
            step += 1
            metrics.accumulate(
                logits.data.argmax(axis=1), labels, np.ones(len(labels), dtype=bool), train_conf
            )
        epoch_loss /= max(len(train_idx), 1)
        train_miou, _, _ = metrics.miou(train_conf)

        val_conf, _ = evaluate(
            dataset, val_idx, params, cfg, bounds, params, eval_batch=config.eval_batch
        )
        val_miou, _, _ = metrics.miou(val_conf)
        history["epoch_loss"].append(epoch_loss)
        history["train_miou"].append(train_miou)
        history["val_miou"].append(val_miou)
        wall = time.monotonic() - t_start
        log(
            f"epoch {epoch} step {step} loss {epoch_loss:.6f} "
            f"train_miou {train_miou:.6f} val_miou {val_miou:.6f} wall {wall:.1f}s"
        )
        if val_miou > best_miou:
            best_miou = val_miou
            save_checkpoint(
                out_ckpt, params, cfg, bounds, state, _ckpt_extra(weights, counts, config)
            )
    history["best_val_miou"] = best_miou
    return history


def _ckpt_extra(weights, counts, config: TrainConfig):
    return {
        "class_weights": weights,
        "class_counts": counts.astype(np.uint32),
        "inner_fraction": np.array([config.inner_fraction]),
        "train_seed": np.array([config.seed], dtype=np.uint32),
    }


# ---------------------------------------------------------------------------
# gradient verification harness


def _seed_fn_from(rng):
    base = int(rng.integers(0, 2**31))

    def fn(name):
        key = zlib.crc32(name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence(base, spawn_key=(key,)))

    return fn


def _readout(t, rng):
    """Scalar projection of a tensor against a fixed random direction."""
    probe = Tensor(rng.standard_normal(t.data.shape))
    return dc.tsum(dc.mul(t, probe))


def _tiny_decoder_setup(rng):
    """Shared small configuration for the composite-op checks."""
    from .synthworld.scenes import default_rig

    cfg = DecoderConfig(
        d=8, heads=2, levels=2, num_layers=1, num_samples=2, group_size=2,
        ffn_hidden=8, head_hidden=8, num_classes=2,
    )
    bounds = SceneBounds(-4.0, -4.0, -1.0, 4.0, 4.0, 1.0)
    rig = default_rig(width=16, height=12)[:2]
    params = init_decoder_params(cfg, seed=int(rng.integers(0, 2**31)))
    params.update(init_stem_params(4, cfg.d, _seed_fn_from(rng)))
    # zero-initialized predictors would hide most gradient paths
    for k in params:
        if "offset.weight" in k or "attn.weight" in k:
            params[k].data = rng.standard_normal(params[k].data.shape) * 0.1
    renders = [rng.standard_normal((12, 16, 4)) * 0.5 for _ in rig]
    points = rng.uniform(-3.0, 3.0, size=(4, 3))
    return cfg, bounds, rig, params, renders, points


def _param_case(params, names, fn):
    """FD over a named subset of `params` with `fn(params_dict) -> scalar`."""
    tensors = [params[k] for k in names]

    def wrapped(*ts):
        pm = dict(params)
        pm.update(dict(zip(names, ts)))
        return fn(pm)

    return wrapped, tensors


def grad_check_suite(seed: int = 0, tol: float = 1e-4, trials: int = 20, max_checks: int = 4):
    """Finite-difference checks for every differentiable operation.

    Runs `trials` seeded configurations per op on small shapes and returns
    the worst relative error per op. Raises VerificationError if any op
    reaches `tol`.
    """
    report = {}

    def record(name, err):
        report[name] = max(report.get(name, 0.0), err)

    for trial in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial,)))
        n, m, k = 3, 4, 2

        def check(name, fn, tensors, checks=max_checks):
            record(name, dc.finite_difference_check(fn, tensors, max_checks=checks, rng=rng))

        x = Tensor(rng.standard_normal((n, m)))
        w = Tensor(rng.standard_normal((m, k)))
        b = Tensor(rng.standard_normal(k))
        check("linear", lambda a, ww, bb: _readout(dc.linear(a, ww, bb), rng), [x, w, b])

        check("softmax", lambda a: _readout(dc.softmax(a), rng), [Tensor(rng.standard_normal((n, m)))])
        check("log_softmax", lambda a: _readout(dc.log_softmax(a), rng), [Tensor(rng.standard_normal((n, m)))])
        for opname, op in (("relu", dc.relu), ("sigmoid", dc.sigmoid), ("sine", dc.sine), ("cosine", dc.cosine)):
            # keep relu inputs away from the kink, where FD is meaningless
            tv = rng.standard_normal((n, m))
            check(opname, lambda a, op=op: _readout(op(a), rng), [Tensor(tv + np.sign(tv) * 0.05)])

        check(
            "add_mul",
            lambda p, q: _readout(dc.mul(p + q, p), rng),
            [Tensor(rng.standard_normal((n, m))), Tensor(rng.standard_normal((n, m)))],
        )
        check(
            "div",
            lambda p, q: _readout(dc.div(p, q), rng),
            [Tensor(rng.standard_normal((n, m))), Tensor(rng.standard_normal((n, m)) + 3.0)],
        )
        check(
            "sum_mean",
            lambda p: _readout(dc.tmean(p, axis=0), rng) + dc.tsum(p) * 0.25,
            [Tensor(rng.standard_normal((n, m)))],
        )
        check(
            "concat",
            lambda p, q: _readout(dc.concat([p, q], axis=1), rng),
            [Tensor(rng.standard_normal((n, 2))), Tensor(rng.standard_normal((n, 3)))],
        )

        fmap = Tensor(rng.standard_normal((2, 5, 6, 3)))
        coords = Tensor(rng.uniform(-0.5, 5.5, size=(7, 2)))
        midx = rng.integers(0, 2, size=7)
        check(
            "bilinear_sample",
            lambda f, c: _readout(dc.bilinear_sample_maps(f, midx, c), rng),
            [fmap, coords],
        )

        img = Tensor(rng.standard_normal((6, 5, 2)))
        kw = Tensor(rng.standard_normal((3, 3, 2, 3)) * 0.3)
        kb = Tensor(rng.standard_normal(3) * 0.1)
        for stride in (1, 2):
            check(
                f"conv2d_s{stride}",
                lambda i, w_, b_, st=stride: _readout(dc.conv2d(i, w_, b_, stride=st), rng),
                [img, kw, kb],
            )
        check("avg_pool2", lambda i: _readout(dc.avg_pool2(i), rng), [Tensor(rng.standard_normal((5, 6, 2)))])
        check(
            "layer_norm",
            lambda xx, gg, bb: _readout(dc.layer_norm(xx, gg, bb), rng),
            [Tensor(rng.standard_normal((n, 6))), Tensor(rng.standard_normal(6) + 1.0), Tensor(rng.standard_normal(6))],
        )

        # composite operations on a shared tiny setup
        cfg, bounds, rig, params, renders, points = _tiny_decoder_setup(rng)
        labels = rng.integers(0, cfg.num_classes + 1, size=len(points))
        wvec = rng.uniform(0.5, 2.0, size=cfg.num_classes + 1)
        names = list(params)

        pts_norm = rng.uniform(0.0, 1.0, size=(3, 3))
        fn, ts = _param_case(
            params,
            [k for k in names if k.startswith("posenc.")],
            lambda pm: _readout(position_encode(pts_norm, pm, cfg), rng),
        )
        check("position_encode", fn, ts)

        query = Tensor(rng.standard_normal((3, cfg.d)) * 0.5)
        ref_rc = rng.uniform(0.0, 3.0, size=(3, 2))
        da_names = [k for k in names if k.startswith("layer1.pca.")]

        def da_fn(pm):
            with dc.no_grad():
                pyramid = build_pyramids(renders[:1], params, cfg.levels)[0]
            pyramid = [Tensor(level.data) for level in pyramid]
            out = deformable_attention(query, ref_rc, pyramid, "layer1.pca", pm, cfg)
            return _readout(out, rng)

        fn, ts = _param_case(params, da_names, da_fn)
        check("deformable_attention", fn, ts, checks=2)

        content = Tensor(rng.standard_normal((len(points), cfg.d)) * 0.5)
        pos = Tensor(rng.standard_normal((len(points), cfg.d)) * 0.5)

        def make_branch_fn(op, branch):
            def branch_fn(pm):
                with dc.no_grad():
                    pyr_data = build_pyramids(renders, params, cfg.levels)
                pyramids = [[Tensor(level.data) for level in pyr] for pyr in pyr_data]
                vmaps = prepare_value_maps(pyramids, pm[f"layer1.{branch}.value.weight"], cfg)
                out = op(points, content, pos, rig, vmaps, f"layer1.{branch}", pm, cfg)
                return _readout(out, rng)

            return branch_fn

        fn, ts = _param_case(
            params,
            [k for k in names if k.startswith("layer1.pca.") or k.startswith("layer1.norm1.")],
            make_branch_fn(point_cross_attention, "pca"),
        )
        check("pca", fn, ts, checks=2)
        fn, ts = _param_case(
            params,
            [k for k in names if k.startswith("layer1.gpca.") or k.startswith("layer1.norm2.")],
            make_branch_fn(group_point_cross_attention, "gpca"),
        )
        check("gpca", fn, ts, checks=2)

        fn, ts = _param_case(
            params,
            [k for k in names if k.startswith("head.")],
            lambda pm: _readout(occupancy_head(content, pm), rng),
        )
        check("occupancy_head", fn, ts)

        fn, ts = _param_case(
            params,
            [k for k in names if k.startswith("stem.")],
            lambda pm: sum(
                (_readout(level, rng) for pyr in build_pyramids(renders, pm, cfg.levels) for level in pyr),
                Tensor(np.zeros(())),
            ),
        )
        check("conv_stem", fn, ts, checks=2)

        def stack_fn(pm):
            pyramids = build_pyramids(renders, pm, cfg.levels)
            logits, _ = decode(points, rig, pyramids, pm, cfg, bounds, mode="full")
            return losses.total_loss(logits, labels, wvec)

        fn, ts = _param_case(params, names, stack_fn)
        check("decoder_stack", fn, ts, checks=1)

        logits = Tensor(rng.standard_normal((4, 3)))
        lab = rng.integers(0, 3, size=4)
        wv = rng.uniform(0.5, 2.0, size=3)
        check("weighted_ce", lambda lg: losses.weighted_ce(lg, lab, wv), [logits])
        check("dice_loss", lambda lg: losses.dice_loss(dc.softmax(lg), lab), [Tensor(rng.standard_normal((4, 3)))])
        check("total_loss", lambda lg: losses.total_loss(lg, lab, wv), [Tensor(rng.standard_normal((4, 3)))])

    failed = {k: v for k, v in report.items() if v >= tol}
    if failed:
        worst = max(failed, key=failed.get)
        raise VerificationError(
            f"gradient check failed for {sorted(failed)} (worst {worst}: {failed[worst]:.3e})"
        )
    return report


def write_history(path, history: dict):
    with open(path, "w") as fh:
        json.dump(history, fh, indent=1, sort_keys=True)
        fh.write("\n")
