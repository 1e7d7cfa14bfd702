"""Command-line entry point for dataset prep, pools, augmentation, training,
evaluation, and report export.

Exit codes: 0 success, 1 usage, 2 data/format problems, 3 numeric failures.
All subcommands are deterministic given identical inputs and seeds.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import Settings, load_settings, settings_help
from .errors import (
    ConsistencyError,
    FormatError,
    NumericError,
    ScenemixError,
    UsageError,
    ValidationError,
)
from .manifests import apply_split, load_dataset, load_split, save_dataset, save_split
from .mixing import ins_fill_traced, mix_with_pool, sample_mask
from .patching import build_labeled_pools, load_pool_manifest, save_pool_manifest
from .scene_model import (
    Scene,
    SyntheticSpec,
    default_synthetic_schema,
    generate_synthetic_scene,
    save_scene,
    split_dataset,
)
from .ssl_harness import (
    IterationLog,
    ToySegmentor,
    config_fingerprint,
    evaluate_miou,
    load_checkpoint,
    run_training,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# fixed qualitative palette, cycled by class id (RGB bytes)
CLASS_COLORS = [
    (128, 128, 128),
    (152, 223, 138),
    (174, 199, 232),
    (31, 119, 180),
    (255, 127, 14),
    (214, 39, 40),
    (148, 103, 189),
    (44, 160, 44),
    (227, 119, 194),
    (188, 189, 34),
    (140, 86, 75),
    (23, 190, 207),
    (196, 156, 148),
    (197, 176, 213),
    (247, 182, 210),
    (219, 219, 141),
    (255, 187, 120),
    (158, 218, 229),
    (199, 199, 199),
    (255, 152, 150),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="YAML config file (keys listed below)")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key",
    )
    sub.add_argument("--seed", type=int, help="override the seed config key")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="scenemix",
        description="Semi-supervised LiDAR segmentation pipeline tools",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = subs.add_parser(
        "gen-synth",
        help="generate a synthetic labeled dataset",
        epilog="reads config keys: seed\nspec flags as listed above",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-scenes", type=int, default=200)
    p.add_argument("--extent", type=float, default=50.0)
    p.add_argument(
        "--class-mix",
        default="4:2.0,5:1.5,6:1.2",
        help="expected instance counts, e.g. 4:2.0,5:1.5",
    )
    p.add_argument("--points-per-instance", default="25:60", help="lo:hi point count range")
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--ground-points", type=int, default=1000)

    p = subs.add_parser(
        "split",
        help="sample a labeled/unlabeled split of a dataset",
        epilog="reads config keys: dataset, seed",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--dataset", help="dataset manifest (overrides config key)")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--out", required=True, help="output split manifest path")

    p = subs.add_parser(
        "pools",
        help="build persistent labeled pools and write their manifest",
        epilog="reads config keys: dataset, split, grid_n, x_min, x_max, y_min, y_max,\n"
        "tau_min, pool_capacity, pool_seed",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--dataset", help="dataset manifest (overrides config key)")
    p.add_argument("--split", help="split manifest; restricts pools to labeled scenes")
    p.add_argument("--out", required=True, help="output pool manifest path (JSON)")

    p = subs.add_parser(
        "augment",
        help="offline patch mixing + instance filling against a pool manifest",
        epilog="reads config keys: dataset, rho_mix, p_fill, context_radius,\n"
        "context_min_points, seed\nscene k uses seed (seed + k)",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--dataset", help="dataset manifest of scenes to augment")
    p.add_argument("--pools", required=True, help="pool manifest from the pools subcommand")
    p.add_argument("--out", required=True, help="output dataset directory")

    for name, desc in (
        ("train-ssl", "teacher-student training with erasure, mixing and filling"),
        ("train-sup", "supervised-only baseline training"),
    ):
        p = subs.add_parser(
            name,
            help=desc,
            epilog="reads config keys:\n" + settings_help(),
            formatter_class=fmt,
        )
        _add_common(p)
        p.add_argument("--dataset", help="dataset manifest (overrides config key)")
        p.add_argument("--split", help="split manifest (overrides config key)")
        p.add_argument("--out", help="run directory (overrides out_dir config key)")

    p = subs.add_parser(
        "eval",
        help="evaluate a checkpoint: per-class IoU table (CSV) plus a figure",
        epilog="reads config keys: dataset, split, grid_n (none required beyond paths)",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset manifest (overrides config key)")
    p.add_argument("--split", help="if given, evaluate on the split's unlabeled scenes")
    p.add_argument("--out", required=True, help="output directory for iou.csv and iou.png")
    p.add_argument("--teacher", action="store_true", help="evaluate the teacher weights")

    p = subs.add_parser(
        "stats",
        help="export erase-fraction/loss time series (CSV) and figures from a run log",
        epilog="reads no config keys",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--log", required=True, help="log.jsonl from a training run")
    p.add_argument("--out", required=True, help="output directory")

    p = subs.add_parser(
        "export-ply",
        help="export a scene as a colored ASCII PLY point cloud",
        epilog="reads config keys: dataset",
        formatter_class=fmt,
    )
    _add_common(p)
    p.add_argument("--dataset", help="dataset manifest (overrides config key)")
    p.add_argument("--scene-id", required=True)
    p.add_argument("--out", required=True, help="output .ply path")

    return parser


def _settings(args, **direct) -> Settings:
    direct.setdefault("dataset", getattr(args, "dataset", None))
    direct.setdefault("split", getattr(args, "split", None))
    if getattr(args, "seed", None) is not None:
        direct["seed"] = args.seed
    return load_settings(args.config, args.overrides, **direct)


def _parse_class_mix(text: str) -> dict[int, float]:
    mix: dict[int, float] = {}
    if not text.strip():
        return mix
    for part in text.split(","):
        key, _, val = part.partition(":")
        try:
            mix[int(key)] = float(val)
        except ValueError as exc:
            raise ValidationError(f"bad class-mix entry {part!r}") from exc
    return mix


def cmd_gen_synth(args) -> int:
    settings = _settings(args)
    lo, _, hi = args.points_per_instance.partition(":")
    spec = SyntheticSpec(
        extent=args.extent,
        class_mix=_parse_class_mix(args.class_mix),
        points_per_instance=(int(lo), int(hi)),
        noise_sigma=args.noise_sigma,
        seed=settings.seed,
        ground_points=args.ground_points,
    )
    schema = default_synthetic_schema()
    scenes = []
    for i in range(args.num_scenes):
        scene = generate_synthetic_scene(spec, spec.seed + i)
        scenes.append(
            Scene(scene.coords, scene.feats, scene.labels, scene_id=f"{i:06d}")
        )
    manifest = save_dataset(args.out, scenes, schema, spec)
    print(f"wrote {len(scenes)} scenes to {manifest}")
    return EXIT_OK


def cmd_split(args) -> int:
    settings = _settings(args)
    if not settings.dataset:
        raise UsageError("split needs --dataset or the dataset config key")
    dataset, _ = load_dataset(settings.dataset, settings.workers)
    split = split_dataset(dataset, args.ratio, settings.seed)
    save_split(
        args.out, settings.dataset, args.ratio, settings.seed, split.labeled_ids, split.unlabeled_ids
    )
    print(
        f"wrote split to {args.out}: {len(split.labeled_ids)} labeled, "
        f"{len(split.unlabeled_ids)} unlabeled"
    )
    return EXIT_OK


def cmd_pools(args) -> int:
    settings = _settings(args)
    if not settings.dataset:
        raise UsageError("pools needs --dataset or the dataset config key")
    dataset, files = load_dataset(settings.dataset, settings.workers)
    if settings.split:
        split = apply_split(dataset, load_split(settings.split))
        labeled = [split.ground_truth_scene(i) for i in split.labeled_ids]
    else:
        labeled = [s for s in dataset.scenes if s.has_labels]
    grid = settings.grid()
    patch_pool, ins_pool = build_labeled_pools(labeled, grid, settings.pool_config(), dataset.schema)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset_root = Path(settings.dataset).parent
    scene_files = {}
    for sid, (bin_rel, label_rel) in files.items():
        if label_rel is None:
            continue
        scene_files[sid] = (
            os.path.relpath(dataset_root / bin_rel, out.parent),
            os.path.relpath(dataset_root / label_rel, out.parent),
        )
    save_pool_manifest(out, patch_pool, ins_pool, grid, settings.pool_config(), dataset.schema, scene_files)
    print(
        f"wrote pool manifest to {out}: {patch_pool.total_entries()} patches, "
        f"{ins_pool.total_entries()} instances"
    )
    return EXIT_OK


def augment_scene(scene, patch_pool, ins_pool, grid, mix_cfg, seed, schema):
    """Mix then fill one labeled scene; the full offline augmentation of one scene."""
    rng = np.random.default_rng(seed)
    mask = sample_mask(grid.total_patches, mix_cfg.rho_mix, rng)
    mixed, prov = mix_with_pool(scene, patch_pool, ~mask.keep, grid, rng)
    return ins_fill_traced(mixed, ins_pool, grid, mix_cfg, rng, schema, provenance=prov)


def cmd_augment(args) -> int:
    settings = _settings(args)
    if not settings.dataset:
        raise UsageError("augment needs --dataset or the dataset config key")
    dataset, _ = load_dataset(settings.dataset, settings.workers)
    patch_pool, ins_pool, grid, _, schema = load_pool_manifest(args.pools)
    mix_cfg = settings.mix_config()

    out_root = Path(args.out)
    (out_root / "scenes").mkdir(parents=True, exist_ok=True)
    augmented = []
    for k, scene in enumerate(dataset.scenes):
        if not scene.has_labels:
            raise ValidationError(f"augment needs labeled scenes ({scene.scene_id!r})")
        aug, prov = augment_scene(
            scene, patch_pool, ins_pool, grid, mix_cfg, settings.seed + k, schema
        )
        augmented.append(aug)
        prov_pairs = np.column_stack([prov.branch, prov.source]).astype("<i4")
        prov_pairs.tofile(out_root / "scenes" / f"{scene.scene_id}.prov")
        (out_root / "scenes" / f"{scene.scene_id}.prov.json").write_text(
            json.dumps({"sources": prov.source_ids}, sort_keys=True) + "\n"
        )
    manifest = save_dataset(out_root, augmented, schema)
    print(f"wrote {len(augmented)} augmented scenes to {manifest}")
    return EXIT_OK


def _run_train(args, supervised_only: bool) -> int:
    direct = {}
    if getattr(args, "out", None):
        direct["out_dir"] = args.out
    settings = _settings(args, **direct)
    if supervised_only:
        settings.use_unlabeled = False
        settings.use_pt_erase = False
        settings.use_mix_patch = False
        settings.use_ins_fill = False
    if not settings.dataset or not settings.split:
        raise UsageError("training needs dataset and split (flags or config keys)")
    dataset, _ = load_dataset(settings.dataset, settings.workers)
    dataset = apply_split(dataset, load_split(settings.split))
    config = settings.train_config(dataset.schema)

    out_dir = Path(settings.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = settings.to_dict()
    # the fingerprint covers training semantics, not where artifacts land
    fingerprint = config_fingerprint({k: v for k, v in snapshot.items() if k != "out_dir"})
    (out_dir / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=True))

    with open(out_dir / "log.jsonl", "w") as log_file:
        state, logs = run_training(
            dataset,
            config,
            settings.iterations,
            settings.seed,
            log_sink=lambda log: log_file.write(log.to_json_line() + "\n"),
        )
    save_checkpoint(
        out_dir / "checkpoint.bin", state.student.params, state.teacher.params, fingerprint
    )
    print(f"trained {settings.iterations} iterations; run artifacts in {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = _settings(args)
    if not settings.dataset:
        raise UsageError("eval needs --dataset or the dataset config key")
    dataset, _ = load_dataset(settings.dataset, settings.workers)
    if settings.split:
        split = apply_split(dataset, load_split(settings.split))
        scenes = [split.ground_truth_scene(i) for i in split.unlabeled_ids]
    else:
        scenes = [s for s in dataset.scenes if s.has_labels]
    if not scenes:
        raise ValidationError("no labeled scenes to evaluate on")

    from . import plots  # deferred: matplotlib import is slow

    student, teacher, _ = load_checkpoint(args.checkpoint)
    segmentor = ToySegmentor(dataset.schema.num_classes)
    segmentor.set_params(teacher if args.teacher else student)
    iou, miou = evaluate_miou(segmentor, scenes, dataset.schema)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "iou.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "name", "iou"])
        for cid, (name, value) in enumerate(zip(dataset.schema.names, iou)):
            writer.writerow([cid, name, "" if np.isnan(value) else f"{value:.6f}"])
        writer.writerow(["", "mIoU", f"{miou:.6f}"])
    plots.save_iou_figure(out_dir / "iou.png", dataset.schema.names, iou, miou)
    for cid, name in enumerate(dataset.schema.names):
        shown = "   nan" if np.isnan(iou[cid]) else f"{iou[cid]:.4f}"
        print(f"{cid:>3} {name:<14} {shown}")
    print(f"mIoU: {miou:.4f}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from . import plots  # deferred: matplotlib import is slow

    log_path = Path(args.log)
    if not log_path.exists():
        raise FormatError(f"{log_path}: no such log file")
    logs = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                logs.append(IterationLog.from_json_line(line))
    if not logs:
        raise FormatError(f"{log_path}: empty log")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pool_keys = sorted(logs[0].pool_sizes)
    with open(out_dir / "stats.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "loss_s", "loss_l", "loss_u", "loss_total", "erase_fraction", *pool_keys]
        )
        for log in logs:
            writer.writerow(
                [
                    log.step,
                    f"{log.loss_s:.8f}",
                    f"{log.loss_l:.8f}",
                    f"{log.loss_u:.8f}",
                    f"{log.loss_total:.8f}",
                    f"{log.erase_fraction:.8f}",
                    *[log.pool_sizes.get(k, 0) for k in pool_keys],
                ]
            )
    steps = [log.step for log in logs]
    plots.save_erase_fraction_figure(
        out_dir / "erase_fraction.png", steps, [log.erase_fraction for log in logs]
    )
    plots.save_series_figure(
        out_dir / "losses.png",
        steps,
        {
            "loss_s": [log.loss_s for log in logs],
            "loss_l": [log.loss_l for log in logs],
            "loss_u": [log.loss_u for log in logs],
        },
        ylabel="loss",
        title="Training losses",
    )
    print(f"wrote stats.csv, erase_fraction.png, losses.png to {out_dir}")
    return EXIT_OK


def cmd_export_ply(args) -> int:
    settings = _settings(args)
    if not settings.dataset:
        raise UsageError("export-ply needs --dataset or the dataset config key")
    dataset, _ = load_dataset(settings.dataset, settings.workers)
    matches = [s for s in dataset.scenes if s.scene_id == args.scene_id]
    if not matches:
        raise ValidationError(f"scene id {args.scene_id!r} not in dataset")
    scene = matches[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {scene.num_points}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for i in range(scene.num_points):
            if scene.has_labels:
                r, g, b = CLASS_COLORS[scene.labels[i] % len(CLASS_COLORS)]
            else:
                shade = int(255 * float(scene.feats[i, 0])) if scene.num_feats else 128
                r = g = b = max(0, min(255, shade))
            x, y, z = scene.coords[i]
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
    print(f"wrote {scene.num_points} points to {out}")
    return EXIT_OK


_HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "pools": cmd_pools,
    "augment": cmd_augment,
    "train-ssl": lambda args: _run_train(args, supervised_only=False),
    "train-sup": lambda args: _run_train(args, supervised_only=True),
    "eval": cmd_eval,
    "stats": cmd_stats,
    "export-ply": cmd_export_ply,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScenemixError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
