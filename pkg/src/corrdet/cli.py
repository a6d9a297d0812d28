"""Command-line entry points: data generation, training, evaluation,
prediction, and ablation sweeps.

Every command writes its effective merged configuration and seeds next to its
outputs so a run is reproducible from the artifacts alone. The output root
can be redirected with the CORRDET_OUT environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .config import RunConfig, apply_overrides, load_config, save_config
from .core import Box, LabeledImage, SupportExample
from .data import CLASS_NAMES, ShapeWorldConfig, build_dataset, build_finetune_set, load_dataset
from .detector import detect, precompute_prototypes
from .errors import CorrdetError, StageMismatch
from .evaluate import (
    multi_run_report,
    write_aggregate_csv,
    write_ap_report_csv,
    write_confusion_csv,
)
from .experiments import directional_experiment, evaluate_run, run_training
from .train import load_checkpoint


def _out_path(path: str) -> Path:
    root = os.environ.get("CORRDET_OUT")
    p = Path(path)
    return Path(root) / p if root and not p.is_absolute() else p


def _merged_config(args) -> RunConfig:
    config = load_config(getattr(args, "config", None))
    return apply_overrides(config, getattr(args, "set", []) or [])


def cmd_generate_data(args) -> int:
    overrides = dict(pair.split("=", 1) for pair in (args.set or []))
    fields = {f.name: f.type for f in dataclasses.fields(ShapeWorldConfig)}
    kwargs = {}
    for key, raw in overrides.items():
        if key not in fields:
            raise KeyError(f"unknown dataset config key {key!r}")
        default = getattr(ShapeWorldConfig(), key)
        kwargs[key] = type(default)(raw) if not isinstance(default, tuple) else tuple(raw.split(","))
    if args.seed is not None:
        kwargs["seed"] = args.seed
    config = ShapeWorldConfig(**kwargs)
    build_dataset(config, _out_path(args.out))
    print(f"dataset written to {_out_path(args.out)}")
    return 0


def _train_common(args, stage: str, model=None, support_set=None, start_step=0) -> int:
    config = _merged_config(args)
    config = replace(config, stage=stage, out_dir=str(_out_path(args.out)), data_dir=args.data)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    dataset = load_dataset(args.data)
    run_training(
        config, dataset, support_set=support_set, model=model,
        start_step=start_step, quiet=False,
    )
    print(f"checkpoints under {config.out_dir}/checkpoints")
    return 0


def cmd_train_base(args) -> int:
    model, start = None, 0
    if args.resume:
        model, _manifest, start = load_checkpoint(args.resume)
    return _train_common(args, "base", model=model, start_step=start)


def cmd_finetune(args) -> int:
    model, manifest, _ = load_checkpoint(args.base_checkpoint)
    if manifest.get("stage") != "base":
        raise StageMismatch(
            f"expected a base-stage checkpoint, got stage {manifest.get('stage')!r}"
        )
    dataset = load_dataset(args.data)
    support_set = build_finetune_set(
        dataset, args.shots, np.random.default_rng(args.support_seed), seed=args.support_seed
    )
    config = _merged_config(args)
    config = replace(
        config,
        shots=args.shots,
        detector=replace(model.config),
    )
    args_config = config
    out = _out_path(args.out)
    with open_support_manifest(out) as f:
        json.dump(
            {
                "shots": support_set.shots,
                "support_seed": support_set.seed,
                "instances": {str(c): list(map(list, v)) for c, v in support_set.instances.items()},
            },
            f, indent=1, sort_keys=True,
        )
    config = replace(args_config, stage="finetune", out_dir=str(out), data_dir=args.data)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    run_training(config, dataset, support_set=support_set, model=model, quiet=False)
    print(f"checkpoints under {config.out_dir}/checkpoints")
    return 0


def open_support_manifest(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    return open(out / "support_manifest.json", "w")


def cmd_evaluate(args) -> int:
    model, manifest, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    out = _out_path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    group_size = args.group_size or manifest.get("episode_classes", 5)
    reports = []
    for seed in args.support_seeds:
        report, confusion = evaluate_run(
            model, dataset, args.shots, seed, group_size, args.threshold
        )
        reports.append(report)
        write_ap_report_csv(out / "reports" / f"ap_seed{seed}.csv", report, CLASS_NAMES)
        write_confusion_csv(out / "reports" / f"confusion_seed{seed}.csv", [confusion], CLASS_NAMES)
        print(f"seed {seed}: novel mAP {report.novel_map:.4f}, base mAP {report.base_map:.4f}")
    if len(reports) >= 2:
        aggregate = multi_run_report(reports)
        write_aggregate_csv(out / "reports" / "aggregate.csv", aggregate)
        print(
            f"novel mAP over {len(reports)} seeds: "
            f"{aggregate['novel_map'].mean:.4f} +/- {aggregate['novel_map'].stddev:.4f}"
        )
    with open(out / "manifest.json", "w") as f:
        json.dump(
            {
                "checkpoint": str(args.checkpoint),
                "support_seeds": args.support_seeds,
                "shots": args.shots,
                "group_size": group_size,
                "threshold": args.threshold,
            },
            f, indent=1, sort_keys=True,
        )
    return 0


def _load_support_dir(path: Path) -> dict[int, list[SupportExample]]:
    """Support directory layout: one subdirectory per class name holding
    cropped instance images; the instance box is the full crop."""
    supports: dict[int, list[SupportExample]] = {}
    for class_dir in sorted(p for p in path.iterdir() if p.is_dir()):
        if class_dir.name not in CLASS_NAMES:
            raise CorrdetError(f"unknown class directory {class_dir.name!r}")
        cid = CLASS_NAMES.index(class_dir.name)
        for img_path in sorted(class_dir.glob("*.png")):
            arr = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
            img = LabeledImage(image=arr)
            supports.setdefault(cid, []).append(
                SupportExample(image=img, instance_box=Box(0.5, 0.5, 1.0, 1.0))
            )
    if not supports:
        raise CorrdetError(f"no support classes found under {path}")
    return supports


def cmd_predict(args) -> int:
    model, _manifest, _ = load_checkpoint(args.checkpoint)
    supports = _load_support_dir(Path(args.support_dir))
    class_order = sorted(supports)
    prototypes, chi = precompute_prototypes(model, supports, class_order)
    arr = np.asarray(Image.open(args.image), dtype=np.float32) / 255.0
    detections = detect(model, arr, prototypes, chi, args.threshold)

    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "detections.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "class_name", "score", "cx", "cy", "w", "h"])
        for d in detections:
            w.writerow(
                [d.class_id, CLASS_NAMES[d.class_id], f"{d.score:.4f}"]
                + [f"{v:.6f}" for v in d.box.as_tuple()]
            )
    overlay = Image.open(args.image).convert("RGB")
    draw = ImageDraw.Draw(overlay)
    width, height = overlay.size
    for d in detections:
        x0, y0, x1, y1 = d.box.xyxy()
        draw.rectangle(
            [x0 * width, y0 * height, x1 * width, y1 * height], outline=(255, 0, 0), width=2
        )
        draw.text((x0 * width + 2, y0 * height + 2), f"{CLASS_NAMES[d.class_id]} {d.score:.2f}")
    overlay.save(out / "overlay.png")
    print(f"{len(detections)} detections; outputs under {out}")
    return 0


def cmd_sweep(args) -> int:
    config = _merged_config(args)
    dataset = load_dataset(args.data)
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_model, manifest, _ = load_checkpoint(args.base_checkpoint)
    rows = []
    for value in args.values:
        if args.axis == "C":
            group_size = int(value)
            det_cfg = replace(base_model.config)
            episode_classes = int(value)
        elif args.axis == "cam_placement":
            det_cfg = replace(base_model.config, cam_placement=int(value))
            episode_classes = config.episode_classes
            group_size = episode_classes
        elif args.axis == "cam_flags":
            flags = dict(zip(("apply_sigmoid", "query_multiply", "model_background"),
                             (c == "1" for c in value)))
            det_cfg = replace(base_model.config, **flags)
            episode_classes = config.episode_classes
            group_size = episode_classes
        else:
            raise ValueError(f"unknown sweep axis {args.axis!r}")
        run_cfg = replace(
            config,
            stage="finetune",
            detector=det_cfg,
            episode_classes=episode_classes,
            shots=args.shots,
            steps=args.steps or config.steps,
            out_dir=str(out / f"{args.axis}_{value}"),
            data_dir=args.data,
        )
        model, _, _ = load_checkpoint(args.base_checkpoint)
        model.config = det_cfg
        model.cam.config = det_cfg.cam_config()
        support_set = build_finetune_set(
            dataset, args.shots, np.random.default_rng(args.support_seed), seed=args.support_seed
        )
        model = run_training(run_cfg, dataset, support_set=support_set, model=model)
        report, confusion = evaluate_run(
            model, dataset, args.shots, args.support_seed, group_size
        )
        rows.append([args.axis, value, f"{report.novel_map:.4f}", f"{report.base_map:.4f}",
                     confusion.cross_count, args.support_seed])
        print(f"{args.axis}={value}: novel mAP {report.novel_map:.4f}")
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "novel_map", "base_map", "cross_confusion", "support_seed"])
        w.writerows(rows)
    return 0


def cmd_ablation(args) -> int:
    config = _merged_config(args)
    dataset = load_dataset(args.data)
    config = replace(config, data_dir=args.data)
    if args.base_steps is not None:
        config = replace(config, steps=args.base_steps)
    results = directional_experiment(
        dataset,
        _out_path(args.out),
        config,
        support_seeds=args.support_seeds,
        shots=args.shots,
        finetune_steps=args.finetune_steps,
        finetune_lr=args.finetune_lr,
        threshold=args.threshold,
    )
    for name, block in results["variants"].items():
        print(f"{name}: mean novel mAP {block['mean_novel_map']:.4f}, "
              f"cross confusion {block['total_cross_confusion']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrdet")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path)")

    p = sub.add_parser("generate-data", help="render the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train-base", help="stage-1 training on base classes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    add_config_args(p)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("finetune", help="stage-2 few-shot fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--support-seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    add_config_args(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="mAP over the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--support-seeds", type=int, nargs="+", default=[0])
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--group-size", type=int)
    p.add_argument("--threshold", type=float, default=0.05)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="detect on one image with support crops")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--support-dir", required=True)
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="fine-tune + evaluate along one ablation axis")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--base-checkpoint", required=True)
    p.add_argument("--axis", required=True, choices=["C", "cam_flags", "cam_placement"])
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--support-seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablation", help="multi-class vs single-class aggregation study")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--support-seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--shots", type=int, default=2)
    p.add_argument("--base-steps", type=int)
    p.add_argument("--finetune-steps", type=int, default=300)
    p.add_argument("--finetune-lr", type=float, default=5e-5)
    p.add_argument("--threshold", type=float, default=0.05)
    add_config_args(p)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CorrdetError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
