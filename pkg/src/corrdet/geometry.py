"""Box geometry: coordinate conversions, IoU and generalized IoU.

All functions operate on torch tensors whose last dimension holds box
coordinates, so they stay differentiable inside the losses. Coordinates are
normalized to [0,1]; pixel space never enters here.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import DegenerateBox

EPS = 1e-9


def box_cxcywh_to_xyxy(b: Tensor) -> Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def box_xyxy_to_cxcywh(b: Tensor) -> Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], dim=-1)


def _areas(b: Tensor) -> Tensor:
    return (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)


def iou(a: Tensor, b: Tensor, strict: bool = False) -> Tensor:
    """Elementwise IoU of xyxy boxes (broadcasting over leading dims).

    With ``strict=True``, a pair where both boxes have zero area raises
    DegenerateBox; the default lenient mode returns 0 there, with an epsilon
    in the denominator so gradients stay finite.
    """
    inter_x0 = torch.maximum(a[..., 0], b[..., 0])
    inter_y0 = torch.maximum(a[..., 1], b[..., 1])
    inter_x1 = torch.minimum(a[..., 2], b[..., 2])
    inter_y1 = torch.minimum(a[..., 3], b[..., 3])
    inter = (inter_x1 - inter_x0).clamp(min=0) * (inter_y1 - inter_y0).clamp(min=0)
    union = _areas(a) + _areas(b) - inter
    if strict and bool((union <= 0).any()):
        raise DegenerateBox("both boxes have zero area")
    return inter / (union + EPS)


def giou(a: Tensor, b: Tensor, strict: bool = False) -> Tensor:
    """Elementwise generalized IoU: IoU minus the enclosing-hull penalty."""
    v = iou(a, b, strict=strict)
    hull_x0 = torch.minimum(a[..., 0], b[..., 0])
    hull_y0 = torch.minimum(a[..., 1], b[..., 1])
    hull_x1 = torch.maximum(a[..., 2], b[..., 2])
    hull_y1 = torch.maximum(a[..., 3], b[..., 3])
    hull = (hull_x1 - hull_x0) * (hull_y1 - hull_y0)
    inter_x0 = torch.maximum(a[..., 0], b[..., 0])
    inter_y0 = torch.maximum(a[..., 1], b[..., 1])
    inter_x1 = torch.minimum(a[..., 2], b[..., 2])
    inter_y1 = torch.minimum(a[..., 3], b[..., 3])
    inter = (inter_x1 - inter_x0).clamp(min=0) * (inter_y1 - inter_y0).clamp(min=0)
    union = _areas(a) + _areas(b) - inter
    return v - (hull - union) / (hull + EPS)


def pairwise_giou(a: Tensor, b: Tensor) -> Tensor:
    """|A| x |B| matrix of GIoU values between two box lists (xyxy)."""
    if a.numel() == 0 or b.numel() == 0:
        return torch.zeros(a.shape[0], b.shape[0], dtype=a.dtype, device=a.device)
    return giou(a[:, None, :], b[None, :, :])
