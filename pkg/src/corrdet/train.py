"""Episodic training loop: optimizer setup, one-step update, checkpoints."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch
from torch import nn

from .core import Episode
from .detector import DetectorConfig, MetaDetector
from .errors import NonFiniteLoss
from .losses import (
    LossWeights,
    detection_loss,
    match_alignment_loss,
    prototype_class_loss,
)
from .matcher import hungarian_match, match_cost
from .targets import remap_targets


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1


def make_optimizer(model: MetaDetector, config: OptimConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )


def _alignment_rows(episode: Episode, h: int, w: int) -> torch.Tensor:
    """Per-token target rows for the matching-coefficient alignment loss:
    tokens whose cell centers fall inside a ground-truth box take that object's
    encoding row (smaller boxes win on overlap), everything else row 0."""
    rows = torch.zeros(len(episode.query_images), h, w, dtype=torch.long)
    grid_y = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    grid_x = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    for b, img in enumerate(episode.query_images):
        anns = [a for a in img.annotations if a.class_id in episode.encoding_map]
        anns.sort(key=lambda a: -(a.box.w * a.box.h))
        for ann in anns:
            x0, y0, x1, y1 = ann.box.xyxy()
            inside = (
                (grid_y[:, None] >= y0)
                & (grid_y[:, None] <= y1)
                & (grid_x[None, :] >= x0)
                & (grid_x[None, :] <= x1)
            )
            rows[b][inside] = episode.encoding_map.to_index(ann.class_id)
    return rows.reshape(len(episode.query_images), h * w)


def episode_loss(
    model: MetaDetector, episode: Episode, weights: LossWeights
) -> tuple[torch.Tensor, dict[str, float]]:
    """Forward one episode and compute the full training objective."""
    from .detector import image_to_tensor

    supports = [list(episode.support_sets[c]) for c in episode.support_classes]
    prototypes = model.build_prototypes(supports)
    encodings = model.task_encodings(episode.num_classes)
    images = torch.stack(
        [image_to_tensor(img.image, model.dtype) for img in episode.query_images]
    )
    layer_logits, layer_boxes = model(images, prototypes, encodings)

    total = images.new_zeros(())
    parts: dict[str, float] = {"loss_cls": 0.0, "loss_l1": 0.0, "loss_giou": 0.0}
    for b, img in enumerate(episode.query_images):
        targets = remap_targets(
            img.annotations, episode.encoding_map, model.config.num_queries, dtype=model.dtype
        )
        logits_b = [logit[b] for logit in layer_logits]
        boxes_b = [box[b] for box in layer_boxes]
        assignments = [
            hungarian_match(match_cost(targets, lg, bx, weights)).sigma
            for lg, bx in zip(logits_b, boxes_b)
        ]
        loss, image_parts = detection_loss(logits_b, boxes_b, targets, assignments, weights)
        total = total + loss
        for k in ("loss_cls", "loss_l1", "loss_giou"):
            parts[k] += image_parts[k]
    total = total / len(episode.query_images)
    for k in parts:
        parts[k] /= len(episode.query_images)

    if model.config.cam_enabled and model.config.model_background:
        match_logits = model.cam.last_match_logits  # (B, HW, C+1)
        h = images.shape[-2] // model.config.stride
        w = images.shape[-1] // model.config.stride
        align = match_alignment_loss(match_logits, _alignment_rows(episode, h, w))
        parts["loss_align"] = float(align.detach())
        total = total + weights.w_align * align

    class_protos = prototypes[1:] if model.config.model_background and model.config.cam_enabled else prototypes
    labels = torch.tensor(list(episode.support_classes), dtype=torch.long)
    proto = prototype_class_loss(
        class_protos, labels, model.class_embeddings, weights.proto_temperature
    )
    parts["loss_proto"] = float(proto.detach())
    total = total + weights.w_proto * proto
    parts["loss_total"] = float(total.detach())
    return total, parts


def train_step(
    model: MetaDetector,
    optimizer: torch.optim.Optimizer,
    episodes: Iterable[Episode],
    weights: LossWeights,
    grad_clip: float = 0.1,
) -> dict[str, float]:
    """One update over a batch of episodes; raises NonFiniteLoss on blow-up."""
    model.train()
    optimizer.zero_grad()
    episodes = list(episodes)
    total = None
    agg: dict[str, float] = {}
    for episode in episodes:
        loss, parts = episode_loss(model, episode, weights)
        total = loss if total is None else total + loss
        for k, v in parts.items():
            agg[k] = agg.get(k, 0.0) + v / len(episodes)
    total = total / len(episodes)
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss: {agg}")
    total.backward()
    nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    agg["loss_total"] = float(total.detach())
    return agg


def save_checkpoint(
    path: str | Path, model: MetaDetector, manifest: dict, step: int = 0
) -> None:
    payload = {
        "state_dict": model.state_dict(),
        "config": dataclasses.asdict(model.config),
        "num_dataset_classes": model.class_embeddings.shape[0],
        "manifest": dict(manifest),
        "step": step,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[MetaDetector, dict, int]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = DetectorConfig(**payload["config"])
    model = MetaDetector(config, num_dataset_classes=payload["num_dataset_classes"])
    model.load_state_dict(payload["state_dict"])
    return model, payload["manifest"], payload["step"]
