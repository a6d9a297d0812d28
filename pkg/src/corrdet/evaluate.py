"""Detection metrics: per-class AP at IoU 0.5, confusion between correlated
class pairs, and mean/stddev aggregation over support-seed runs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .core import Annotation, ClassId, ClassSplit
from .detector import Detection
from .geometry import iou


def _iou_matrix(det_boxes, gt_boxes) -> np.ndarray:
    """IoU between detection and ground-truth box lists (normalized cxcywh)."""
    if not det_boxes or not gt_boxes:
        return np.zeros((len(det_boxes), len(gt_boxes)))
    a = torch.tensor([b.xyxy() for b in det_boxes], dtype=torch.float64)
    b = torch.tensor([b.xyxy() for b in gt_boxes], dtype=torch.float64)
    return iou(a[:, None, :], b[None, :, :]).numpy()


@dataclass(frozen=True)
class APReport:
    per_class_ap: dict[ClassId, float]
    novel_map: float
    base_map: float
    run_seed: int = 0

    @property
    def overall_map(self) -> float:
        if not self.per_class_ap:
            return float("nan")
        return float(np.mean(list(self.per_class_ap.values())))


def average_precision(
    scored: list[tuple[float, int, int]],  # (score, image idx, det idx in image)
    ious: dict[int, np.ndarray],  # image idx -> (n_det, n_gt) IoU matrix
    num_gt: dict[int, int],
    iou_threshold: float,
) -> float:
    """All-points-interpolated AP with greedy score-ordered matching."""
    total_gt = sum(num_gt.values())
    if total_gt == 0:
        return float("nan")
    matched: dict[int, set[int]] = {i: set() for i in num_gt}
    tp = []
    for _score, img, det in sorted(scored, key=lambda t: (-t[0], t[1], t[2])):
        mat = ious.get(img)
        best_iou, best_gt = iou_threshold, -1
        if mat is not None and mat.size:
            for g in range(mat.shape[1]):
                if g not in matched[img] and mat[det, g] >= best_iou:
                    best_iou, best_gt = mat[det, g], g
        if best_gt >= 0:
            matched[img].add(best_gt)
            tp.append(1)
        else:
            tp.append(0)
    if not tp:
        return 0.0
    tp = np.array(tp)
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    # precision envelope, integrated over recall steps
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def evaluate_map(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Annotation]],
    split: ClassSplit,
    iou_threshold: float = 0.5,
    run_seed: int = 0,
) -> APReport:
    """Per-class AP@IoU over parallel per-image detection / GT lists.

    Classes with no ground truth anywhere are left out of the report.
    """
    assert len(detections) == len(ground_truth)
    classes = sorted({a.class_id for gts in ground_truth for a in gts})
    per_class: dict[ClassId, float] = {}
    for cid in classes:
        scored, ious, num_gt = [], {}, {}
        for img, (dets, gts) in enumerate(zip(detections, ground_truth)):
            cls_dets = [d for d in dets if d.class_id == cid]
            cls_gts = [g for g in gts if g.class_id == cid]
            num_gt[img] = len(cls_gts)
            ious[img] = _iou_matrix([d.box for d in cls_dets], [g.box for g in cls_gts])
            scored.extend((d.score, img, k) for k, d in enumerate(cls_dets))
        per_class[cid] = average_precision(scored, ious, num_gt, iou_threshold)

    def mean_over(ids) -> float:
        vals = [per_class[c] for c in ids if c in per_class and not math.isnan(per_class[c])]
        return float(np.mean(vals)) if vals else float("nan")

    return APReport(
        per_class_ap=per_class,
        novel_map=mean_over(split.novel_classes),
        base_map=mean_over(split.base_classes),
        run_seed=run_seed,
    )


@dataclass
class PairConfusion:
    """Confusion counts for one correlated class pair (x, y)."""

    class_x: ClassId
    class_y: ClassId
    counts: dict[str, int] = field(
        default_factory=lambda: {
            "gt_x_pred_x": 0, "gt_x_pred_y": 0, "gt_x_pred_other": 0, "gt_x_missed": 0,
            "gt_y_pred_y": 0, "gt_y_pred_x": 0, "gt_y_pred_other": 0, "gt_y_missed": 0,
        }
    )

    @property
    def cross_count(self) -> int:
        return self.counts["gt_x_pred_y"] + self.counts["gt_y_pred_x"]


def confusion_pairs(
    detections: Sequence[Sequence[Detection]],
    ground_truth: Sequence[Sequence[Annotation]],
    pairs: Sequence[tuple[ClassId, ClassId]],
    iou_threshold: float = 0.5,
) -> list[PairConfusion]:
    """Tally predicted classes for each GT instance of the paired classes.

    Each GT instance takes its best-IoU detection at or above the threshold
    regardless of predicted class; unmatched instances count as missed.
    """
    results = [PairConfusion(class_x=x, class_y=y) for x, y in pairs]
    for dets, gts in zip(detections, ground_truth):
        if not gts:
            continue
        mat = _iou_matrix([d.box for d in dets], [g.box for g in gts])
        for g, ann in enumerate(gts):
            pred_cls = None
            if mat.size:
                best = int(np.argmax(mat[:, g]))
                if mat[best, g] >= iou_threshold:
                    pred_cls = dets[best].class_id
            for pc in results:
                for me, other, side in ((pc.class_x, pc.class_y, "x"), (pc.class_y, pc.class_x, "y")):
                    if ann.class_id != me:
                        continue
                    if pred_cls is None:
                        pc.counts[f"gt_{side}_missed"] += 1
                    elif pred_cls == me:
                        pc.counts[f"gt_{side}_pred_{side}"] += 1
                    elif pred_cls == other:
                        pc.counts[f"gt_{side}_pred_{'y' if side == 'x' else 'x'}"] += 1
                    else:
                        pc.counts[f"gt_{side}_pred_other"] += 1
    return results


@dataclass(frozen=True)
class AggregateCell:
    mean: float
    stddev: float


def multi_run_report(reports: Sequence[APReport]) -> dict[str, AggregateCell]:
    """Mean and sample stddev per class and per aggregate across runs."""
    if len(reports) < 2:
        raise ValueError("multi_run_report needs at least 2 runs")

    def cell(values: list[float]) -> AggregateCell:
        vals = [v for v in values if not math.isnan(v)]
        if not vals:
            return AggregateCell(float("nan"), float("nan"))
        return AggregateCell(
            mean=float(np.mean(vals)),
            stddev=float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
        )

    out: dict[str, AggregateCell] = {}
    class_ids = sorted({c for r in reports for c in r.per_class_ap})
    for cid in class_ids:
        out[f"class_{cid}"] = cell([r.per_class_ap.get(cid, float("nan")) for r in reports])
    out["novel_map"] = cell([r.novel_map for r in reports])
    out["base_map"] = cell([r.base_map for r in reports])
    out["overall_map"] = cell([r.overall_map for r in reports])
    return out


def write_ap_report_csv(path: str | Path, report: APReport, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class_id", "class_name", "ap"])
        for cid, ap in sorted(report.per_class_ap.items()):
            w.writerow([cid, class_names[cid], f"{ap:.6f}"])
        w.writerow(["", "novel_map", f"{report.novel_map:.6f}"])
        w.writerow(["", "base_map", f"{report.base_map:.6f}"])


def write_aggregate_csv(path: str | Path, aggregate: dict[str, AggregateCell]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "mean", "stddev"])
        for name, c in aggregate.items():
            w.writerow([name, f"{c.mean:.6f}", f"{c.stddev:.6f}"])


def write_confusion_csv(path: str | Path, confusions: Sequence[PairConfusion], class_names) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", *next(iter(confusions)).counts.keys()]) if confusions else None
        for pc in confusions:
            w.writerow(
                [f"{class_names[pc.class_x]}|{class_names[pc.class_y]}", *pc.counts.values()]
            )
