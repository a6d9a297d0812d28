"""Optimal bipartite assignment between prediction slots and target slots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from .errors import NonFiniteCost, ShapeMismatch
from .geometry import box_cxcywh_to_xyxy, pairwise_giou
from .losses import LossWeights
from .targets import EMPTY, DetectionTargets


@dataclass(frozen=True)
class Assignment:
    """Permutation mapping target slot i to prediction slot sigma[i]."""

    sigma: Tensor  # (N,) long
    total_cost: float


@torch.no_grad()
def match_cost(
    targets: DetectionTargets, logits: Tensor, boxes: Tensor, weights: LossWeights
) -> Tensor:
    """N x N matching cost; entry (i, j) prices assigning prediction j to
    target i. Rows of padded targets are identically zero, so they soak up
    whichever predictions the object rows do not claim.

    The classification term is the focal-consistent cost difference between
    treating the prediction as a positive vs. a negative for the target's
    encoding slot.
    """
    n_targets = targets.num_slots
    if logits.shape[0] != n_targets or boxes.shape[0] != n_targets:
        raise ShapeMismatch(
            f"{n_targets} targets vs {logits.shape[0]} logits / {boxes.shape[0]} boxes"
        )
    cost = torch.zeros(n_targets, n_targets, dtype=logits.dtype)
    obj_mask = targets.labels != EMPTY
    if not obj_mask.any():
        return cost

    alpha, gamma = weights.focal_alpha, weights.focal_gamma
    p = torch.sigmoid(logits)
    pos_cost = alpha * (1 - p) ** gamma * -torch.log(p.clamp(min=1e-12))
    neg_cost = (1 - alpha) * p**gamma * -torch.log((1 - p).clamp(min=1e-12))
    cls_cost = pos_cost - neg_cost  # (N_pred, C)

    labels = targets.labels[obj_mask] - 1
    cls = cls_cost[:, labels].t()  # (n_obj, N_pred)
    l1 = torch.cdist(targets.boxes[obj_mask], boxes, p=1)
    gi = pairwise_giou(box_cxcywh_to_xyxy(targets.boxes[obj_mask]), box_cxcywh_to_xyxy(boxes))
    cost[obj_mask] = weights.w_cls * cls + weights.w_l1 * l1 + weights.w_giou * (1 - gi)
    return cost


def hungarian_match(cost: Tensor) -> Assignment:
    """Globally optimal assignment for a finite square cost matrix."""
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeMismatch(f"cost matrix must be square, got {tuple(cost.shape)}")
    c = cost.detach().cpu().numpy().astype(np.float64)
    if not np.isfinite(c).all():
        raise NonFiniteCost("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(c)
    sigma = torch.as_tensor(cols, dtype=torch.long)
    return Assignment(sigma=sigma, total_cost=float(c[rows, cols].sum()))
