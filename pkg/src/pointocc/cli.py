"""Command-line entry point covering the full experiment surface.

Every run writes a `<output>.manifest.json` with the resolved
configuration, seed and content hashes of its inputs, so identical flags
reproduce identical outputs bit for bit.

Exit codes: 0 success, 2 usage/config, 3 data error, 4 numeric
divergence, 5 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import metrics, refine, train as train_mod
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    PointOccError,
    ShapeError,
    VerificationError,
)
from .geometry import GridSpec, SceneBounds
from .synthworld import Dataset, SceneSpec, generate_dataset, load_tensors, save_tensors
from .train import TrainConfig


def _hash_path(path) -> str:
    """Content hash of a file or directory tree (names + bytes)."""
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    for chunk in iter(lambda: fh.read(1 << 20), b""):
                        h.update(chunk)
    else:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path, command: str, config: dict, inputs: dict, outputs: list):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {k: _hash_path(v) for k, v in inputs.items() if v and os.path.exists(v)},
        "outputs": sorted(outputs),
    }
    with open(str(out_path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    if args.scenes <= 0:
        raise ConfigError("--scenes must be positive")
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"{args.out} exists and is not empty; pass --force to overwrite")
    spec = SceneSpec()
    if args.grid:
        nx, ny, nz, vox = args.grid.split(",")
        nx, ny, nz, vox = int(nx), int(ny), int(nz), float(vox)
        bounds = SceneBounds(
            -nx * vox / 2, -ny * vox / 2, -1.0, nx * vox / 2, ny * vox / 2, -1.0 + nz * vox
        )
        spec = SceneSpec(grid=GridSpec(bounds, nx, ny, nz, vox))
    generate_dataset(args.out, args.scenes, args.seed, spec)
    config = {
        "scenes": args.scenes,
        "seed": args.seed,
        "grid": {
            "nx": spec.grid.nx,
            "ny": spec.grid.ny,
            "nz": spec.grid.nz,
            "voxel_size": spec.grid.voxel_size,
            "bounds": list(spec.grid.bounds.as_tuple()),
        },
    }
    _write_manifest(os.path.join(args.out, "run"), "gen-data", config, {}, [args.out])
    print(f"wrote {args.scenes} scenes to {args.out}")
    return 0


def _train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        k_points=args.k_points,
        lr=args.lr,
        num_layers=args.layers,
        levels=args.levels,
        group_size=args.group_size,
        perturb_radius=0.0 if args.no_perturb else args.perturb,
        use_dice=not args.no_dice,
        seed=args.seed,
        val_scenes=args.val_scenes,
        inner_fraction=args.inner,
    )


def cmd_train(args):
    if not os.path.isdir(args.data):
        raise ConfigError(f"dataset directory {args.data} does not exist")
    dataset = Dataset(args.data)
    config = _train_config_from_args(args)
    log_path = args.log or (args.out + ".log")
    if os.path.exists(log_path):
        os.remove(log_path)
    history = train_mod.train(config, dataset, args.out, log_path=log_path)
    from dataclasses import asdict

    _write_manifest(args.out, "train", asdict(config), {"data": args.data}, [args.out, log_path])
    print(f"best val mIoU {history['best_val_miou']:.6f} -> {args.out}")
    return 0


def _parse_mode(mode: str):
    if mode == "grid":
        return "full", None
    if mode.startswith("early-exit:"):
        return "early_exit", float(mode.split(":", 1)[1])
    raise ConfigError(f"unknown eval mode {mode!r} (use grid or early-exit:T)")


def cmd_eval(args):
    dataset = Dataset(args.data)
    params, cfg, bounds, extra = train_mod.load_checkpoint(args.ckpt)
    decode_mode, threshold = _parse_mode(args.mode)
    _, val_idx = train_mod.split_scenes(dataset, args.val_scenes)
    conf, rel = train_mod.evaluate(
        dataset, val_idx, params, cfg, bounds, params, mode=decode_mode, threshold=threshold
    )
    extra_kv = {"relative_computation": f"{rel:.6f}"} if decode_mode == "early_exit" else {}
    text, kv = metrics.format_report(conf, dataset.class_names, extra=extra_kv)
    report = args.report or (args.ckpt + ".eval")
    metrics.write_report(report, text, kv)
    _write_manifest(
        report,
        "eval",
        {"mode": args.mode, "val_scenes": args.val_scenes},
        {"data": args.data, "ckpt": args.ckpt},
        [report + ".txt", report + ".kv"],
    )
    print(text)
    return 0


def cmd_beyond(args):
    dataset = Dataset(args.data)
    params, cfg, bounds, extra = train_mod.load_checkpoint(args.ckpt)
    if not 0.0 < args.inner <= 1.0:
        raise ConfigError("--inner must be in (0, 1]")
    _, val_idx = train_mod.split_scenes(dataset, args.val_scenes)
    inner_mask = train_mod.inner_region_mask(dataset, args.inner)
    ranges = {
        "standard": inner_mask,
        "large": np.ones(dataset.grid.num_voxels, dtype=bool),
        "beyond": ~inner_mask,
    }
    texts = []
    kv_all = {}
    for name, mask in ranges.items():
        conf, _ = train_mod.evaluate(
            dataset, val_idx, params, cfg, bounds, params, region_mask=mask
        )
        text, kv = metrics.format_report(conf, dataset.class_names)
        texts.append(f"== range {name} ==\n{text}")
        for k, v in kv.items():
            kv_all[f"{name}.{k}"] = v
        if conf.visible_voxels == 0:
            kv_all[f"{name}.no_evaluable_region"] = "1"
    report = args.report or (args.ckpt + ".beyond")
    metrics.write_report(report, "\n".join(texts), kv_all)
    _write_manifest(
        report,
        "beyond",
        {"inner": args.inner, "val_scenes": args.val_scenes},
        {"data": args.data, "ckpt": args.ckpt},
        [report + ".txt", report + ".kv"],
    )
    print("\n".join(texts))
    return 0


def cmd_train_baseline(args):
    dataset = Dataset(args.data)
    params, cfg, bounds, extra = train_mod.load_checkpoint(args.stem_from)
    stem = {k: v for k, v in params.items() if k.startswith("stem.")}
    train_idx, _ = train_mod.split_scenes(dataset, args.val_scenes)
    baseline = refine.volume_baseline_train(
        dataset, train_idx, stem, dataset.num_classes, seed=args.seed, epochs=args.epochs
    )
    refine.save_baseline(args.out, baseline, stem, dataset.num_classes)
    _write_manifest(
        args.out,
        "train-baseline",
        {"epochs": args.epochs, "seed": args.seed, "val_scenes": args.val_scenes},
        {"data": args.data, "stem_from": args.stem_from},
        [args.out],
    )
    print(f"baseline -> {args.out}")
    return 0


def cmd_refine(args):
    dataset = Dataset(args.data)
    baseline, stem, classes = refine.load_baseline(args.baseline)
    params, cfg, bounds, extra = train_mod.load_checkpoint(args.points)
    _, val_idx = train_mod.split_scenes(dataset, args.val_scenes)

    modes = [m for m in (args.scale is not None, args.adaptive is not None, args.adaptive_fraction is not None) if m]
    if len(modes) != 1:
        raise ConfigError("pass exactly one of --scale / --adaptive / --adaptive-fraction")

    vol_cache = {}

    def volume_probs(i):
        if i not in vol_cache:
            vol_cache[i] = refine.volume_baseline_infer(dataset, i, stem, baseline)
        return vol_cache[i]

    point_cache = {}

    def point_probs(i):
        if i not in point_cache:
            _, probs, _ = train_mod.predict_grid(dataset, i, params, cfg, bounds, params)
            point_cache[i] = probs
        return point_cache[i]

    if args.scale is not None:
        region = refine.box_region(dataset.grid, args.scale)
        region_desc = {"mode": "box", "scale": args.scale}
    elif args.adaptive is not None:
        stacked = np.mean([volume_probs(i).max(axis=1) for i in val_idx], axis=0)
        region = refine.RefineRegion("adaptive-threshold", np.nonzero(stacked < args.adaptive)[0])
        region_desc = {"mode": "adaptive-threshold", "threshold": args.adaptive}
    else:
        stacked = np.mean([volume_probs(i).max(axis=1) for i in val_idx], axis=0)
        count = int(round(args.adaptive_fraction * len(stacked)))
        order = np.argsort(stacked, kind="stable")
        region = refine.RefineRegion("adaptive-fraction", np.sort(order[:count]))
        region_desc = {"mode": "adaptive-fraction", "fraction": args.adaptive_fraction}

    conf_base, conf_point, conf_fused = refine.evaluate_fused(
        dataset, val_idx, volume_probs, point_probs, region, args.lam, dataset.num_classes,
        on_logits=args.logit_fusion,
    )
    texts = []
    kv_all = {
        "region.size": str(len(region)),
        "region.fraction": f"{len(region) / dataset.grid.num_voxels:.6f}",
    }
    for name, conf in (("baseline", conf_base), ("points", conf_point), ("fused", conf_fused)):
        text, kv = metrics.format_report(conf, dataset.class_names)
        texts.append(f"== {name} ==\n{text}")
        for k, v in kv.items():
            kv_all[f"{name}.{k}"] = v
    report = args.report or (args.points + ".refine")
    metrics.write_report(report, "\n".join(texts), kv_all)

    outputs = [report + ".txt", report + ".kv"]
    if args.out:
        fused_grids = {}
        for i in val_idx:
            labels, _ = refine.fuse(
                volume_probs(i), point_probs(i)[region.voxel_indices], region, args.lam,
                args.logit_fusion,
            )
            fused_grids[f"fused_scene_{i:04d}"] = labels.reshape(dataset.grid.shape).astype(np.uint8)
        save_tensors(args.out, fused_grids, meta={"kind": "refined-grids"})
        outputs.append(args.out)
    _write_manifest(
        report,
        "refine",
        {**region_desc, "lambda": args.lam, "val_scenes": args.val_scenes},
        {"data": args.data, "baseline": args.baseline, "points": args.points},
        outputs,
    )
    print("\n".join(texts))
    return 0


def cmd_grad_check(args):
    report = train_mod.grad_check_suite(seed=args.seed, trials=args.trials)
    for name in sorted(report):
        print(f"{name:<24} max rel err {report[name]:.3e}")
    print("gradient checks passed")
    return 0


def cmd_export_csv(args):
    labels = load_tensors(os.path.join(args.scene, "labels.ospt"))["labels"]
    dataset = Dataset(os.path.dirname(os.path.abspath(args.scene.rstrip("/"))))
    centers = dataset.grid.centers()
    flat = labels.reshape(-1)
    occ = flat != 0
    with open(args.out, "w") as fh:
        fh.write("x,y,z,label\n")
        for (x, y, z), lab in zip(centers[occ], flat[occ]):
            fh.write(f"{x!r},{y!r},{z!r},{int(lab)}\n")
    print(f"wrote {int(occ.sum())} occupied voxels to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pointocc", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--grid", help="nx,ny,nz,voxel_size override")
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train the point decoder")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=24)
    t.add_argument("--k-points", type=int, default=2048)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--layers", type=int, default=3)
    t.add_argument("--levels", type=int, default=2, choices=(2, 4))
    t.add_argument("--group-size", type=int, default=4)
    t.add_argument("--perturb", type=float, default=0.1)
    t.add_argument("--no-perturb", action="store_true")
    t.add_argument("--no-dice", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--val-scenes", type=int, default=16)
    t.add_argument("--inner", type=float, default=1.0, help="train only inside this x/y fraction")
    t.add_argument("--log")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the validation scenes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", default="grid", help="grid | early-exit:T")
    e.add_argument("--val-scenes", type=int, default=16)
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("beyond", help="evaluate inner box / full scene / annulus")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--inner", type=float, default=0.75)
    b.add_argument("--val-scenes", type=int, default=16)
    b.add_argument("--report")
    b.set_defaults(fn=cmd_beyond)

    tb = sub.add_parser("train-baseline", help="train the volume-baseline stub")
    tb.add_argument("--data", required=True)
    tb.add_argument("--stem-from", required=True, help="point checkpoint providing the frozen stem")
    tb.add_argument("--out", required=True)
    tb.add_argument("--epochs", type=int, default=12)
    tb.add_argument("--seed", type=int, default=0)
    tb.add_argument("--val-scenes", type=int, default=16)
    tb.set_defaults(fn=cmd_train_baseline)

    r = sub.add_parser("refine", help="fuse the volume baseline with point predictions")
    r.add_argument("--baseline", required=True)
    r.add_argument("--points", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--scale", type=float, help="box region side length in meters")
    r.add_argument("--adaptive", type=float, help="confidence threshold region")
    r.add_argument("--adaptive-fraction", type=float, help="lowest-confidence fraction region")
    r.add_argument("--lambda", dest="lam", type=float, default=0.5)
    r.add_argument("--logit-fusion", action="store_true")
    r.add_argument("--val-scenes", type=int, default=16)
    r.add_argument("--out", help="write fused label grids to this container")
    r.add_argument("--report")
    r.set_defaults(fn=cmd_refine)

    gc = sub.add_parser("grad-check", help="finite-difference verification of all gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--trials", type=int, default=20)
    gc.set_defaults(fn=cmd_grad_check)

    x = sub.add_parser("export-csv", help="dump a scene's occupied voxels as CSV")
    x.add_argument("--scene", required=True, help="scene directory inside a dataset")
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_csv)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 5
    except PointOccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
