"""Differentiable loss terms for the set-prediction objective.

The total objective combines a sigmoid focal classification loss over all
prediction slots, L1 + GIoU box regression on matched object slots (repeated
for every decoder layer), and a cosine-similarity cross-entropy loss that
classifies support prototypes against learnable per-class embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import AssignmentInvalid
from .geometry import box_cxcywh_to_xyxy, giou
from .targets import EMPTY, DetectionTargets


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_proto: float = 1.0
    w_align: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    proto_temperature: float = 0.05


def sigmoid_focal_loss(
    logits: Tensor, targets: Tensor, alpha: float = 0.25, gamma: float = 2.0
) -> Tensor:
    """Per-element focal loss: -alpha_t (1-p_t)^gamma log(p_t).

    ``targets`` is a {0,1} tensor of the same shape as ``logits``; the caller
    chooses the reduction.
    """
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha >= 0:
        alpha_t = alpha * targets + (1 - alpha) * (1 - targets)
        loss = alpha_t * loss
    return loss


def box_loss(pred: Tensor, target: Tensor) -> tuple[Tensor, Tensor]:
    """L1 over cxcywh coordinates and (1 - GIoU), elementwise over box pairs."""
    l1 = (pred - target).abs().sum(-1)
    g = giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(target))
    return l1, 1 - g


def _check_permutation(sigma: Tensor, n: int) -> None:
    if sigma.shape != (n,) or not torch.equal(
        torch.sort(sigma).values, torch.arange(n, dtype=sigma.dtype)
    ):
        raise AssignmentInvalid(f"assignment {sigma.tolist()} is not a permutation of 0..{n - 1}")


def detection_loss(
    layer_logits: list[Tensor],
    layer_boxes: list[Tensor],
    targets: DetectionTargets,
    assignments: list[Tensor],
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Set-prediction loss for one query image, summed over decoder layers.

    ``assignments[l][i]`` is the prediction slot matched to target slot i at
    layer l. Classification covers all N slots (padded targets contribute
    all-zero rows); box terms apply only to object slots. Each term is
    normalized by the number of object targets, clamped at 1.
    """
    n_slots, n_cls = layer_logits[0].shape
    obj_mask = targets.labels != EMPTY
    num_pos = max(int(obj_mask.sum()), 1)

    total = layer_logits[0].new_zeros(())
    parts = {"loss_cls": 0.0, "loss_l1": 0.0, "loss_giou": 0.0}
    for logits, boxes, sigma in zip(layer_logits, layer_boxes, assignments):
        _check_permutation(sigma, n_slots)
        onehot = torch.zeros_like(logits)
        if obj_mask.any():
            pred_idx = sigma[obj_mask]
            onehot[pred_idx, targets.labels[obj_mask] - 1] = 1.0
        cls = (
            sigmoid_focal_loss(logits, onehot, weights.focal_alpha, weights.focal_gamma).sum()
            / num_pos
        )
        term = weights.w_cls * cls
        parts["loss_cls"] += float(cls.detach())
        if obj_mask.any():
            l1, gi = box_loss(boxes[pred_idx], targets.boxes[obj_mask])
            l1 = l1.sum() / num_pos
            gi = gi.sum() / num_pos
            term = term + weights.w_l1 * l1 + weights.w_giou * gi
            parts["loss_l1"] += float(l1.detach())
            parts["loss_giou"] += float(gi.detach())
        total = total + term
    parts["loss_total"] = float(total.detach())
    return total, parts


def match_alignment_loss(match_logits: Tensor, token_rows: Tensor) -> Tensor:
    """Cross-entropy aligning per-token matching logits with known regions.

    ``match_logits`` is (B, HW, C+1) pre-softmax matching scores over the
    prototype rows; ``token_rows`` is (B, HW) long with the encoding row each
    token should match (0 = background). Without pretrained features the
    coefficient matrix has no discriminative signal to bootstrap from, so the
    known object regions supervise it directly.
    """
    return F.cross_entropy(
        match_logits.reshape(-1, match_logits.shape[-1]), token_rows.reshape(-1)
    )


def prototype_class_loss(
    prototypes: Tensor,
    labels: Tensor,
    class_embeddings: Tensor,
    temperature: float = 0.05,
) -> Tensor:
    """Cosine-similarity cross-entropy classifying each prototype as its class.

    ``prototypes`` excludes the background row; ``labels`` holds global class
    ids indexing rows of ``class_embeddings``.
    """
    sims = F.normalize(prototypes, dim=-1) @ F.normalize(class_embeddings, dim=-1).t()
    return F.cross_entropy(sims / temperature, labels)
