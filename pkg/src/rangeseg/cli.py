"""Command-line surface: train, infer, eval, uncertainty, project.

Exit codes: 0 success, 2 usage or input-path problems, 1 runtime failure.
Each run drops a manifest.json (written atomically) recording arguments,
outputs, and a projection/network/kNN timing breakdown.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    load_kv_file,
    model_config_from_dict,
    train_config_from_dict,
)
from .errors import RangesegError
from .imageio import save_grayscale, save_labels
from .metrics import ConfusionMatrix
from .model import build_model, micro_config
from .pointcloud import (
    ClassMap,
    default_scene_spec,
    generate_synthetic_scene,
    read_kitti_labels,
    read_kitti_scan,
    write_kitti_labels,
)
from .postproc import KnnConfig, knn_filter
from .projection import ProjectionConfig, back_project, build_range_image
from .train import TrainConfig, evaluate_pointwise, train
from .uncertainty import (
    SensorNoiseModel,
    adf_infer,
    default_rate_grid,
    grid_search_dropout_rate,
    mc_dropout_infer,
)


class UsageError(Exception):
    """Bad arguments, missing files, unreadable configs: exit code 2."""


# ---------------------------------------------------------------- helpers


def _require_file(path, what="file"):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def _write_json_atomic(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _manifest(command, args_dict, timings_ms, extra=None):
    payload = {
        "command": command,
        "args": {k: v for k, v in args_dict.items() if not callable(v)},
        "timings_ms": {k: round(v, 3) for k, v in timings_ms.items()},
        "versions": {
            "rangeseg": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    payload.update(extra or {})
    return payload


def _proj_from_args(args, extras=None):
    """Projection geometry: CLI flags override checkpoint extras override defaults."""
    extras = extras or {}
    w = args.width if args.width is not None else int(extras.get("proj.w", 2048))
    h = args.height if args.height is not None else int(extras.get("proj.h", 64))
    up = args.fov_up if args.fov_up is not None else math.degrees(float(extras.get("proj.fov_up", math.radians(3.0))))
    down = args.fov_down if args.fov_down is not None else math.degrees(float(extras.get("proj.fov_down", math.radians(-25.0))))
    return ProjectionConfig(w=w, h=h, fov_up=math.radians(up), fov_down=math.radians(down))


def _proj_flags(p):
    p.add_argument("--width", type=int, default=None, help="range image width")
    p.add_argument("--height", type=int, default=None, help="range image height")
    p.add_argument("--fov-up", type=float, default=None, help="upper vertical FoV, degrees")
    p.add_argument("--fov-down", type=float, default=None, help="lower vertical FoV, degrees (negative)")


def _knn_flags(p):
    p.add_argument("--knn-window", type=int, default=5)
    p.add_argument("--knn-k", type=int, default=5)
    p.add_argument("--knn-cutoff", type=float, default=1.0)
    p.add_argument("--knn-weights", choices=("uniform", "inverse-range-gap"), default="inverse-range-gap")
    p.add_argument("--no-knn", action="store_true", help="skip the kNN cleanup")


def _knn_from_args(args):
    return KnnConfig(
        window=args.knn_window, k=args.knn_k, cutoff=args.knn_cutoff, weighting=args.knn_weights
    )


def _expand_label_sources(paths, what):
    """Accept files and/or directories; directories contribute their members."""
    out = []
    for p in paths:
        if os.path.isdir(p):
            out.extend(
                os.path.join(p, name) for name in sorted(os.listdir(p)) if name.endswith(".label")
            )
        else:
            out.append(_require_file(p, what))
    if not out:
        raise UsageError(f"no {what}s given")
    return out


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _load_scan(path):
    with open(_require_file(path, "scan"), "rb") as fh:
        return read_kitti_scan(fh.read())


def _load_synthetic_dataset(args):
    spec0 = None
    scans = []
    for i in range(args.num_scans):
        spec = default_scene_spec(args.seed + i, num_classes=args.classes, rows=args.height or 64, cols=args.width or 512)
        spec0 = spec0 or spec
        scans.append(generate_synthetic_scene(seed=10_000 + args.seed + i, spec=spec))
    return scans, spec0


def _load_dir_dataset(data_dir, class_map):
    bins = sorted(f for f in os.listdir(data_dir) if f.endswith(".bin"))
    if not bins:
        raise UsageError(f"no .bin scans under {data_dir}")
    scans = []
    for name in bins:
        scan = _load_scan(os.path.join(data_dir, name))
        label_path = os.path.join(data_dir, _stem(name) + ".label")
        _require_file(label_path, "label file")
        with open(label_path, "rb") as fh:
            scan = read_kitti_labels(fh.read(), scan, class_map)
        scans.append(scan)
    return scans


# ---------------------------------------------------------------- commands


def cmd_train(args):
    out_dir = _ensure_dir(args.out_dir)
    class_map = None
    if args.data:
        if not os.path.isdir(args.data):
            raise UsageError(f"dataset directory not found: {args.data}")
        if args.classmap:
            class_map = ClassMap.load(_require_file(args.classmap, "class map"))
        scans = _load_dir_dataset(args.data, class_map)
        num_classes = class_map.num_classes if class_map else int(max(s.labels.max() for s in scans)) + 1
    else:
        scans, _ = _load_synthetic_dataset(args)
        num_classes = args.classes

    if args.model_config:
        model_cfg = model_config_from_dict(load_kv_file(_require_file(args.model_config, "model config")))
    else:
        model_cfg = micro_config(num_classes=num_classes)
    if model_cfg.num_classes != num_classes and args.data is None:
        raise UsageError(
            f"model config has {model_cfg.num_classes} classes, synthetic data has {num_classes}"
        )
    if args.train_config:
        train_cfg = train_config_from_dict(load_kv_file(_require_file(args.train_config, "train config")))
    else:
        train_cfg = TrainConfig(epochs=args.epochs, batch_size=4, seed=args.seed, augment=not args.no_augment)

    # synthetic scenes are ray-cast on a 64x512 grid; project onto the same
    proj_defaults = {} if args.data else {"proj.w": 512, "proj.h": 64}
    proj = _proj_from_args(args, proj_defaults)
    model = build_model(model_cfg, seed=args.seed)
    t0 = time.perf_counter()
    log_path = os.path.join(out_dir, "metrics.jsonl")
    result = train(model, scans, proj, train_cfg, log_path=log_path)
    train_ms = (time.perf_counter() - t0) * 1000.0

    cm = evaluate_pointwise(model, scans, proj, _knn_from_args(args) if not args.no_knn else None)
    extras = {
        "proj.w": proj.w,
        "proj.h": proj.h,
        "proj.fov_up": repr(proj.fov_up),
        "proj.fov_down": repr(proj.fov_down),
    }
    ckpt_path = os.path.join(out_dir, "checkpoint.rseg")
    save_checkpoint(model, extras, path=ckpt_path)

    manifest = _manifest(
        "train",
        vars(args),
        {"train": train_ms, "total": train_ms},
        {
            "checkpoint": ckpt_path,
            "metrics_log": log_path,
            "epochs": len(result.history),
            "final_lr": result.final_lr,
            "final_train_miou_pointwise": cm.miou(),
            "per_class_iou": _iou_list(cm),
        },
    )
    _write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    print(f"trained {len(result.history)} epochs; point-wise train mIoU {cm.miou():.4f}")
    return 0


def _iou_list(cm):
    return [None if math.isnan(v) else round(float(v), 6) for v in cm.iou()]


def cmd_infer(args):
    if not args.scans:
        raise UsageError("no scans given")
    model, _, extras = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    proj = _proj_from_args(args, extras)
    class_map = ClassMap.load(_require_file(args.classmap, "class map")) if args.classmap else None
    knn_cfg = None if args.no_knn else _knn_from_args(args)
    out_dir = _ensure_dir(args.out_dir)

    per_scan = []
    outputs = []
    totals = {"projection": 0.0, "network": 0.0, "knn": 0.0, "total": 0.0}
    for path in args.scans:
        scan = _load_scan(path)
        t0 = time.perf_counter()
        img = build_range_image(scan, proj)
        t1 = time.perf_counter()
        probs = model.forward(img.channels, mode="eval")
        pixel_labels = probs.argmax(axis=0).astype(np.int32)
        t2 = time.perf_counter()
        points = back_project(pixel_labels, img, fill=0)
        if knn_cfg is not None:
            points = knn_filter(img, pixel_labels, scan.ranges(), points, knn_cfg)
        t3 = time.perf_counter()

        out_path = os.path.join(out_dir, _stem(path) + ".label")
        with open(out_path, "wb") as fh:
            fh.write(write_kitti_labels(points, class_map))
        outputs.append(out_path)
        if args.png:
            save_labels(os.path.join(out_dir, _stem(path) + ".png"), pixel_labels, model.cfg.num_classes)
        timing = {
            "projection": (t1 - t0) * 1e3,
            "network": (t2 - t1) * 1e3,
            "knn": (t3 - t2) * 1e3,
            "total": (t3 - t0) * 1e3,
        }
        for k, v in timing.items():
            totals[k] += v
        per_scan.append({"scan": path, "out": out_path, **{k: round(v, 3) for k, v in timing.items()}})

    manifest = _manifest("infer", vars(args), totals, {"outputs": outputs, "per_scan": per_scan})
    _write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    print(json.dumps({k: round(v, 3) for k, v in totals.items()}))
    return 0


def _read_label_file(path):
    with open(path, "rb") as fh:
        raw = np.frombuffer(fh.read(), dtype="<u4")
    return (raw & 0xFFFF).astype(np.int64)


def cmd_eval(args):
    preds = _expand_label_sources(args.pred, "prediction file")
    gts = _expand_label_sources(args.gt, "label file")
    pred_by_stem = {_stem(p): p for p in preds}
    gt_by_stem = {_stem(p): p for p in gts}
    if sorted(pred_by_stem) != sorted(gt_by_stem):
        raise UsageError("prediction and ground-truth file stems do not match")

    class_map = ClassMap.load(_require_file(args.classmap, "class map")) if args.classmap else None
    num_classes = args.classes or (class_map.num_classes if class_map else None)
    if num_classes is None:
        raise UsageError("need --classes or --classmap to size the confusion matrix")
    cm = ConfusionMatrix(num_classes)
    counts = 0
    for stem in sorted(pred_by_stem):
        p = _read_label_file(pred_by_stem[stem])
        g = _read_label_file(gt_by_stem[stem])
        if len(p) != len(g):
            raise UsageError(f"{stem}: {len(p)} predictions vs {len(g)} labels")
        if class_map is not None:
            p, g = class_map.remap(p), class_map.remap(g)
        cm.accumulate(g, p, ignore=args.ignore)
        counts += len(p)

    report = {
        "miou": cm.miou(),
        "per_class_iou": _iou_list(cm),
        "confusion": cm.counts.tolist(),
        "points": counts,
        "num_classes": num_classes,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _write_json_atomic(args.out, report)
    print(text)
    return 0


def cmd_uncertainty(args):
    if not args.scans:
        raise UsageError("no scans given")
    if args.mc_trials < 1:
        raise UsageError("--mc-trials must be >= 1")
    model, _, extras = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    proj = _proj_from_args(args, extras)
    noise = None
    if args.noise_config:
        noise = SensorNoiseModel.from_dict(load_kv_file(_require_file(args.noise_config, "noise config")))
    elif args.noise_var is not None:
        noise = SensorNoiseModel.isotropic(args.noise_var)
    out_dir = _ensure_dir(args.out_dir)

    if args.grid_search and not args.gt:
        raise UsageError("--grid-search needs --gt label files for the calibration scans")
    if args.gt and len(args.gt) != len(args.scans):
        raise UsageError("--gt must list one label file per scan")

    outputs = []
    calibration = []
    for i, path in enumerate(args.scans):
        scan = _load_scan(path)
        img = build_range_image(scan, proj)
        stem = _stem(path)
        mc = mc_dropout_infer(model, img.channels, args.mc_trials, seed=args.seed, rate=args.rate)
        np.save(os.path.join(out_dir, f"{stem}_epistemic.npy"), mc.epistemic)
        outputs.append(save_grayscale(os.path.join(out_dir, f"{stem}_epistemic.png"), mc.epistemic))
        if noise is not None:
            adf = adf_infer(model, img.channels, noise, img.valid)
            np.save(os.path.join(out_dir, f"{stem}_aleatoric.npy"), adf.aleatoric)
            outputs.append(save_grayscale(os.path.join(out_dir, f"{stem}_aleatoric.png"), adf.aleatoric))
        if args.gt:
            with open(_require_file(args.gt[i], "label file"), "rb") as fh:
                labeled = read_kitti_labels(fh.read(), scan)
            calibration.append((img.channels, img.label_image(labeled.labels, fill=0), img.valid))

    result = {"outputs": outputs, "mc_trials": args.mc_trials}
    if args.grid_search:
        if noise is None:
            noise = SensorNoiseModel.isotropic(0.0)
        rates = [float(t) for t in args.rates.split(",")] if args.rates else default_rate_grid()
        best, objectives = grid_search_dropout_rate(
            model, calibration, rates, noise, n_trials=args.mc_trials, seed=args.seed
        )
        result["selected_rate"] = best
        result["objectives"] = {f"{r:.6g}": o for r, o in sorted(objectives.items())}
        print(f"selected_rate={best:.6g}")

    manifest = _manifest("uncertainty", vars(args), {}, result)
    _write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    return 0


def cmd_project(args):
    scan = _load_scan(args.scan)
    proj = _proj_from_args(args)
    out_dir = _ensure_dir(args.out_dir)
    t0 = time.perf_counter()
    img = build_range_image(scan, proj)
    proj_ms = (time.perf_counter() - t0) * 1e3

    names = ("x", "y", "z", "intensity", "range")
    outputs = []
    for i, name in enumerate(names):
        outputs.append(save_grayscale(os.path.join(out_dir, f"{name}.png"), img.channels[i]))
    outputs.append(save_grayscale(os.path.join(out_dir, "valid.png"), img.valid.astype(np.float64)))

    mapped = int((img.pixel_of_point[:, 0] >= 0).sum())
    valid_pixels = int(img.valid.sum())
    report = {
        "points": len(scan),
        "mapped_points": mapped,
        "valid_pixels": valid_pixels,
        "collisions": mapped - valid_pixels,
    }
    manifest = _manifest(
        "project", vars(args), {"projection": proj_ms, "total": proj_ms},
        {"outputs": outputs, "report": report},
    )
    _write_json_atomic(os.path.join(out_dir, "manifest.json"), manifest)
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rangeseg",
        description="Range-image semantic segmentation of LiDAR point clouds.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic or KITTI-format scans")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--synthetic", action="store_true", help="generate a synthetic dataset")
    src.add_argument("--data", help="directory of .bin scans with matching .label files")
    p.add_argument("--classmap", help="raw-to-train id map file")
    p.add_argument("--num-scans", type=int, default=20, help="synthetic dataset size")
    p.add_argument("--classes", type=int, default=4, help="synthetic class count")
    p.add_argument("--epochs", type=int, default=30, help="used when no --train-config")
    p.add_argument("--model-config", help="key=value model config file")
    p.add_argument("--train-config", help="key=value train config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    _proj_flags(p)
    _knn_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict per-point labels for scans")
    p.add_argument("scans", nargs="*", help=".bin scan files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--classmap", help="write benchmark raw ids using this map")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--png", action="store_true", help="also write label-map images")
    p.add_argument("--seed", type=int, default=0)
    _proj_flags(p)
    _knn_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", nargs="+", required=True, help="prediction .label files or dirs")
    p.add_argument("--gt", nargs="+", required=True, help="ground-truth .label files or dirs")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--classmap", help="remap raw ids before scoring")
    p.add_argument("--ignore", type=int, nargs="*", default=(), help="ground-truth ids to skip")
    p.add_argument("--out", help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("uncertainty", help="epistemic/aleatoric maps, optional rate search")
    p.add_argument("scans", nargs="*", help=".bin scan files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mc-trials", type=int, default=30)
    p.add_argument("--rate", type=float, default=None, help="override the dropout rate")
    p.add_argument("--noise-config", help="key=value per-channel variances (x,y,z,intensity,range)")
    p.add_argument("--noise-var", type=float, default=None, help="isotropic input variance")
    p.add_argument("--grid-search", action="store_true")
    p.add_argument("--rates", help="comma-separated candidate dropout rates")
    p.add_argument("--gt", nargs="*", help="label files (calibration for --grid-search)")
    p.add_argument("--seed", type=int, default=0)
    _proj_flags(p)
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("project", help="inspect the spherical projection of one scan")
    p.add_argument("--scan", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _proj_flags(p)
    p.set_defaults(func=cmd_project)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RangesegError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
