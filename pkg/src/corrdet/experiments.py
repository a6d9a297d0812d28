"""Run-level drivers: training loops with logging/checkpoints, multi-class
evaluation over a dataset, and the aggregation-ablation experiment comparing
simultaneous multi-class support aggregation against single-class baselines.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .config import RunConfig, config_to_dict, save_config
from .core import Annotation, ClassId
from .data import (
    CLASS_NAMES,
    SPLIT_TEST,
    FewShotDataset,
    KShotSupportSet,
    build_finetune_set,
    sample_episode,
    support_examples,
)
from .detector import Detection, MetaDetector, detect, precompute_prototypes
from .errors import NonFiniteLoss
from .evaluate import APReport, PairConfusion, confusion_pairs, evaluate_map
from .train import load_checkpoint, make_optimizer, save_checkpoint, train_step

# class families ordered so visually similar classes land in the same
# evaluation group (round shapes together, boxy together, pointy together)
EVAL_CLASS_ORDER = (
    "circle-filled", "circle-outline", "ring-filled", "ring-outline",
    "square-filled", "square-outline", "cross-filled", "cross-outline",
    "star-filled", "star-outline", "triangle-filled", "triangle-outline",
)


def config_hash(config: RunConfig) -> str:
    doc = yaml.safe_dump(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()[:16]


def run_training(
    config: RunConfig,
    dataset: FewShotDataset,
    support_set: KShotSupportSet | None = None,
    model: MetaDetector | None = None,
    start_step: int = 0,
    quiet: bool = True,
) -> MetaDetector:
    """Episodic training for either stage; writes logs, checkpoints, and the
    resolved config under ``config.out_dir``.

    Episode sampling derives a fresh stream from (seed, step), so resuming at
    step s replays the exact schedule an uninterrupted run would have seen.
    """
    out = Path(config.out_dir)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.resolved.yaml")

    if config.stage == "finetune" and support_set is None:
        raise ValueError("finetune stage requires a support set")
    torch.manual_seed(config.seed)
    if model is None:
        model = MetaDetector(config.detector, num_dataset_classes=len(CLASS_NAMES))
    optimizer = make_optimizer(model, config.optim)

    manifest = {
        "stage": config.stage,
        "episode_classes": config.episode_classes,
        "shots": config.shots,
        "seed": config.seed,
        "support_seed": support_set.seed if support_set else None,
        "config_hash": config_hash(config),
    }
    best = math.inf
    log_path = out / "logs" / "loss.csv"
    mode = "a" if start_step > 0 and log_path.exists() else "w"
    with open(log_path, mode, newline="") as f:
        writer = csv.writer(f)
        if mode == "w":
            writer.writerow(
                ["step", "loss_total", "loss_cls", "loss_l1", "loss_giou",
                 "loss_proto", "loss_align"]
            )
        for step in range(start_step, config.steps):
            rng = np.random.default_rng([config.seed, step])
            try:
                episodes = [
                    sample_episode(
                        dataset,
                        config.stage,
                        config.episode_classes,
                        config.shots,
                        rng,
                        num_queries=config.queries_per_episode,
                        support_set=support_set,
                    )
                    for _ in range(config.batch_episodes)
                ]
                parts = train_step(
                    model, optimizer, episodes, config.loss, config.optim.grad_clip
                )
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"at step {step}: {exc}") from exc
            writer.writerow(
                [step]
                + [
                    f"{parts.get(k, 0.0):.6f}"
                    for k in ("loss_total", "loss_cls", "loss_l1", "loss_giou",
                              "loss_proto", "loss_align")
                ]
            )
            if parts["loss_total"] < best:
                best = parts["loss_total"]
                save_checkpoint(out / "checkpoints" / "best.pt", model, manifest, step + 1)
            if (step + 1) % config.checkpoint_every == 0 or step + 1 == config.steps:
                save_checkpoint(out / "checkpoints" / "final.pt", model, manifest, step + 1)
            if not quiet and (step % 50 == 0 or step + 1 == config.steps):
                print(f"step {step}: {parts['loss_total']:.4f}", flush=True)
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest | {"steps": config.steps}, f, indent=1, sort_keys=True)
    return model


def make_eval_groups(group_size: int, class_ids: list[ClassId] | None = None) -> list[list[ClassId]]:
    """Chunk classes into detection groups of at most ``group_size``, keeping
    visually similar classes together so simultaneous aggregation can
    contrast them."""
    ordered = [CLASS_NAMES.index(n) for n in EVAL_CLASS_ORDER]
    if class_ids is not None:
        ordered = [c for c in ordered if c in class_ids]
    return [ordered[i : i + group_size] for i in range(0, len(ordered), group_size)]


@torch.no_grad()
def evaluate_model(
    model: MetaDetector,
    dataset: FewShotDataset,
    support_set: KShotSupportSet,
    group_size: int,
    threshold: float = 0.05,
    split: str = SPLIT_TEST,
) -> tuple[list[list[Detection]], list[list[Annotation]]]:
    """Detect every dataset class over a split, in groups of ``group_size``
    support classes at a time, with prototypes precomputed once per group."""
    model.eval()
    groups = make_eval_groups(group_size, support_set.classes())
    cached = []
    for group in groups:
        supports = {c: support_examples(dataset, support_set, c) for c in group}
        cached.append((precompute_prototypes(model, supports, group), group))
    detections: list[list[Detection]] = []
    ground_truth: list[list[Annotation]] = []
    for rec in dataset.scenes(split):
        img = dataset.load_image(rec)
        dets: list[Detection] = []
        for (prototypes, chi), _group in cached:
            dets.extend(detect(model, img.image, prototypes, chi, threshold))
        detections.append(sorted(dets, key=lambda d: -d.score))
        ground_truth.append(list(rec.annotations))
    return detections, ground_truth


def evaluate_run(
    model: MetaDetector,
    dataset: FewShotDataset,
    shots: int,
    support_seed: int,
    group_size: int,
    threshold: float = 0.05,
    confusion_pair_names: tuple[str, str] = ("ring-filled", "circle-filled"),
) -> tuple[APReport, PairConfusion]:
    """One evaluation run: build the seeded K-shot support set, detect over
    the test split, and score mAP plus the correlated-pair confusion."""
    support_set = build_finetune_set(
        dataset, shots, np.random.default_rng(support_seed), seed=support_seed
    )
    dets, gts = evaluate_model(model, dataset, support_set, group_size, threshold)
    report = evaluate_map(dets, gts, dataset.split, run_seed=support_seed)
    pair = (CLASS_NAMES.index(confusion_pair_names[0]), CLASS_NAMES.index(confusion_pair_names[1]))
    confusion = confusion_pairs(dets, gts, [pair])[0]
    return report, confusion


def directional_experiment(
    dataset: FewShotDataset,
    out_dir: str | Path,
    base_config: RunConfig,
    support_seeds: list[int] = [0, 1, 2, 3, 4],
    shots: int = 2,
    finetune_steps: int = 300,
    finetune_lr: float = 5e-5,
    threshold: float = 0.05,
) -> dict:
    """Compare three training setups at K=``shots``: multi-class aggregation
    (C=5), single-class aggregation (C=1), and the no-aggregation-module
    reweighting baseline (C=1). Base-trains each once, then fine-tunes and
    evaluates per support seed.

    Returns per-seed novel mAP and correlated-pair confusion counts.
    """
    out = Path(out_dir)
    variants = {
        "c5_cam": dict(episode_classes=5, cam_enabled=True),
        "c1_cam": dict(episode_classes=1, cam_enabled=True),
        "c1_nocam": dict(episode_classes=1, cam_enabled=False),
    }
    results: dict = {"shots": shots, "seeds": support_seeds, "variants": {}}
    for name, v in variants.items():
        det_cfg = replace(
            base_config.detector,
            max_support_classes=v["episode_classes"],
            cam_enabled=v["cam_enabled"],
            model_background=v["cam_enabled"],
        )
        cfg = replace(
            base_config,
            stage="base",
            episode_classes=v["episode_classes"],
            detector=det_cfg,
            out_dir=str(out / name / "base"),
        )
        t0 = time.time()
        run_training(cfg, dataset)
        per_seed = []
        for seed in support_seeds:
            support_set = build_finetune_set(
                dataset, shots, np.random.default_rng(seed), seed=seed
            )
            model, _, _ = load_checkpoint(out / name / "base" / "checkpoints" / "final.pt")
            ft_cfg = replace(
                cfg,
                stage="finetune",
                shots=shots,
                steps=finetune_steps,
                optim=replace(cfg.optim, lr=finetune_lr),
                out_dir=str(out / name / f"finetune_seed{seed}"),
            )
            model = run_training(ft_cfg, dataset, support_set=support_set, model=model)
            report, confusion = evaluate_run(
                model, dataset, shots, seed,
                group_size=v["episode_classes"], threshold=threshold,
            )
            per_seed.append(
                {
                    "seed": seed,
                    "novel_map": report.novel_map,
                    "base_map": report.base_map,
                    "cross_confusion": confusion.cross_count,
                    "per_class_ap": {int(k): v for k, v in report.per_class_ap.items()},
                    "confusion_counts": dict(confusion.counts),
                }
            )
        results["variants"][name] = {
            "runs": per_seed,
            "mean_novel_map": float(np.mean([r["novel_map"] for r in per_seed])),
            "total_cross_confusion": int(sum(r["cross_confusion"] for r in per_seed)),
            "wall_time_s": time.time() - t0,
        }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.json", "w") as f:
        json.dump(results, f, indent=1, sort_keys=True)
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "seed", "novel_map", "base_map", "cross_confusion"])
        for name, block in results["variants"].items():
            for r in block["runs"]:
                w.writerow(
                    [name, r["seed"], f"{r['novel_map']:.4f}", f"{r['base_map']:.4f}", r["cross_confusion"]]
                )
    return results
