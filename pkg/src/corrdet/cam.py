"""Correlational aggregation: matching query features against all support
class prototypes and their task encodings simultaneously.

The module attends query tokens over the prototype set (plus a learnable
background prototype), filters query features through the matched prototype
sigmoids, mixes in the corresponding task encodings, and feeds the sum
through an FFN. Every reduction over the class axis goes through
``ordered_sum`` so that jointly permuting (prototype, encoding) rows leaves
the output bitwise unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torchvision.ops import roi_align

from .errors import OddDimension, ShapeMismatch

ENCODING_BASE = 10000.0


@dataclass(frozen=True)
class CamConfig:
    dim: int = 128
    heads: int = 8
    pool_size: int = 7
    # ablation switches for the three attention modifications
    apply_sigmoid: bool = True
    query_multiply: bool = True
    model_background: bool = True


def make_task_encodings(
    num_classes: int, dim: int, dtype: torch.dtype = torch.float32
) -> Tensor:
    """(C+1) x d table: row 0 is the all-zero background encoding, row p >= 1
    interleaves (sin, cos) of p / base^(2k/d) like transformer positional
    encodings."""
    if dim % 2 != 0:
        raise OddDimension(f"encoding dimension must be even, got {dim}")
    if num_classes < 0:
        raise ValueError(f"num_classes must be >= 0, got {num_classes}")
    table = torch.zeros(num_classes + 1, dim, dtype=dtype)
    pos = torch.arange(1, num_classes + 1, dtype=dtype)[:, None]
    freq = torch.exp(
        torch.arange(0, dim, 2, dtype=dtype) * (-math.log(ENCODING_BASE) / dim)
    )
    table[1:, 0::2] = torch.sin(pos * freq)
    table[1:, 1::2] = torch.cos(pos * freq)
    return table


def ordered_sum(x: Tensor, dim: int) -> Tensor:
    """Sum along ``dim`` with the terms sorted by value first, so the result
    depends only on the multiset of terms and not their original order."""
    return x.sort(dim=dim).values.sum(dim=dim)


def ordered_softmax(logits: Tensor, dim: int) -> Tensor:
    """Row-stochastic softmax whose normalizer uses order-independent summation."""
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    e = torch.exp(shifted)
    return e / ordered_sum(e, dim=dim).unsqueeze(dim)


def ordered_mix(a: Tensor, v: Tensor) -> Tensor:
    """Order-independent ``a @ v`` over the class axis.

    a: (..., HW, C), v: (C, d) -> (..., HW, d).
    """
    return ordered_sum(a.unsqueeze(-1) * v.reshape((1,) * (a.ndim - 1) + v.shape), dim=-2)


class CorrelationalAggregation(nn.Module):
    """Weight-shared encoding of query/support features, prototype extraction,
    feature matching, encoding matching, and the output FFN."""

    def __init__(self, config: CamConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.proj = nn.Linear(d, d, bias=False)  # shared projection for Q and S
        self.shared_attn = nn.MultiheadAttention(d, config.heads, batch_first=True)
        self.encode_norm = nn.LayerNorm(d)
        self.match_norm = nn.LayerNorm(d)
        self.ffn_norm = nn.LayerNorm(d)
        self.bg_prototype = nn.Parameter(torch.zeros(d))
        self.ffn = nn.Sequential(
            nn.Linear(d, 4 * d), nn.ReLU(), nn.Linear(4 * d, d)
        )
        nn.init.normal_(self.bg_prototype, std=0.02)
        self.last_match_logits: Tensor | None = None

    def encode(self, tokens: Tensor) -> Tensor:
        """Shared self-attention sublayer (pre-norm), applied identically to
        query tokens and support tokens."""
        x = self.encode_norm(tokens)
        attn, _ = self.shared_attn(x, x, x, need_weights=False)
        return tokens + attn

    def extract_prototypes(
        self, support_features: list[list[tuple[Tensor, Tensor]]]
    ) -> Tensor:
        """Pool one prototype vector per support class.

        ``support_features[c]`` lists (feature_map, instance_box) pairs for
        the K shots of class c; feature_map is (h, w, d) and instance_box is
        a normalized xyxy tensor. Each map is encoded with the shared
        attention sublayer, the box region is pooled to a fixed grid and
        averaged over the grid and the shots. Row 0 of the result is the
        learnable background prototype (when enabled).
        """
        protos = []
        for shots in support_features:
            pooled = []
            for feat, box in shots:
                h, w, d = feat.shape
                enc = self.encode(feat.reshape(1, h * w, d)).reshape(h, w, d)
                scaled = torch.stack(
                    [box[0] * w, box[1] * h, box[2] * w, box[3] * h]
                ).to(enc.dtype)
                rois = torch.cat([scaled.new_zeros(1), scaled])[None]
                region = roi_align(
                    enc.permute(2, 0, 1)[None],
                    rois,
                    output_size=self.config.pool_size,
                    aligned=True,
                )
                pooled.append(region.mean(dim=(2, 3)).squeeze(0))
            protos.append(torch.stack(pooled).mean(dim=0))
        rows = torch.stack(protos) if protos else self.bg_prototype.new_zeros(0, self.config.dim)
        if self.config.model_background:
            rows = torch.cat([self.bg_prototype[None], rows], dim=0)
        return rows

    def feature_match(self, q: Tensor, prototypes: Tensor) -> tuple[Tensor, Tensor]:
        """Matching coefficients and filtered query features.

        q: (..., HW, d) encoded query tokens; prototypes: (C+1, d) (or (C, d)
        without background modeling). Returns the row-stochastic coefficient
        matrix A and the filtered features.
        """
        if q.shape[-1] != prototypes.shape[-1]:
            raise ShapeMismatch(
                f"query dim {q.shape[-1]} != prototype dim {prototypes.shape[-1]}"
            )
        d = q.shape[-1]
        # prototype-side ops avoid BLAS gemm: its blocking makes results
        # depend on row position, which would break bitwise permutation
        # invariance over the class axis
        s_proj = (prototypes[:, None, :] * self.proj.weight).sum(-1)
        logits = (self.proj(q).unsqueeze(-2) * s_proj).sum(-1) / math.sqrt(d)
        self.last_match_logits = logits  # exposed for the alignment loss
        a = ordered_softmax(logits, dim=-1)
        filters = torch.sigmoid(prototypes) if self.config.apply_sigmoid else prototypes
        mixed = ordered_mix(a, filters)
        q_f = mixed * q if self.config.query_multiply else mixed
        return a, q_f

    def encoding_match(self, a: Tensor, encodings: Tensor) -> Tensor:
        """Mix task encodings with the shared matching coefficients: A @ T."""
        if a.shape[-1] != encodings.shape[0]:
            raise ShapeMismatch(
                f"{a.shape[-1]} coefficient columns vs {encodings.shape[0]} encodings"
            )
        return ordered_mix(a, encodings)

    def forward(self, q_tokens: Tensor, prototypes: Tensor, encodings: Tensor) -> Tensor:
        """Aggregate query tokens against the support set.

        q_tokens: (..., HW, d); prototypes and encodings are row-aligned,
        including the background row when enabled. Output has the shape of
        ``q_tokens``.
        """
        if prototypes.shape[0] != encodings.shape[0]:
            raise ShapeMismatch(
                f"{prototypes.shape[0]} prototype rows vs {encodings.shape[0]} encoding rows"
            )
        q = self.encode(q_tokens)
        a, q_f = self.feature_match(self.match_norm(q), prototypes)
        q_e = self.encoding_match(a, encodings)
        x = q + q_f + q_e
        return x + self.ffn(self.ffn_norm(x))
