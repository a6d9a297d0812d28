"""End-to-end image-level detector.

A small strided conv stack produces single-scale feature tokens; the encoder
runs the correlational aggregation module at a configurable layer and plain
self-attention elsewhere; a decoder with learned object queries emits per-layer
classification logits over task-encoding slots plus normalized boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor, nn

from .cam import CamConfig, CorrelationalAggregation, make_task_encodings
from .core import Box, ClassId, LabeledImage, SupportExample
from .errors import ImageTooSmall, MissingClassSupport, ShapeMismatch
from .targets import ChiMap, build_encoding_map


@dataclass(frozen=True)
class DetectorConfig:
    dim: int = 128
    heads: int = 8
    enc_layers: int = 3
    dec_layers: int = 3
    num_queries: int = 20
    max_support_classes: int = 5  # classification head width
    stride: int = 16
    cam_placement: int = 1  # encoder layer (1-based) running the aggregation
    cam_enabled: bool = True
    apply_sigmoid: bool = True
    query_multiply: bool = True
    model_background: bool = True
    pool_size: int = 7

    def cam_config(self) -> CamConfig:
        return CamConfig(
            dim=self.dim,
            heads=self.heads,
            pool_size=self.pool_size,
            apply_sigmoid=self.apply_sigmoid,
            query_multiply=self.query_multiply,
            model_background=self.model_background,
        )


def grid_positional_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> Tensor:
    """Fixed 2D sine/cosine positional encodings for an h x w token grid."""
    half = dim // 2
    freq = torch.exp(
        torch.arange(0, half, 2, dtype=dtype) * (-math.log(10000.0) / half)
    )
    ys = torch.arange(h, dtype=dtype)[:, None] * freq
    xs = torch.arange(w, dtype=dtype)[:, None] * freq
    y_enc = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # (h, half)
    x_enc = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # (w, half)
    pos = torch.cat(
        [
            y_enc[:, None, :].expand(h, w, half),
            x_enc[None, :, :].expand(h, w, half),
        ],
        dim=-1,
    )
    return pos.reshape(h * w, dim)


class FeatureExtractor(nn.Module):
    """Stacked stride-2 conv blocks: 3 channels in, ``dim`` channels out,
    downsampling by ``stride`` (a power of two between 4 and 16)."""

    _CHANNELS = {4: (2, 1), 8: (4, 2, 1), 16: (4, 2, 1, 1)}  # dim divisors

    def __init__(self, dim: int, stride: int = 16):
        super().__init__()
        if stride not in self._CHANNELS:
            raise ValueError(f"stride must be one of {sorted(self._CHANNELS)}, got {stride}")
        divisors = self._CHANNELS[stride]
        chans = [3] + [dim // d for d in divisors]
        blocks = []
        for i in range(len(divisors)):
            blocks.append(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1))
            blocks.append(nn.GroupNorm(min(8, chans[i + 1]), chans[i + 1]))
            if i < len(divisors) - 1:
                blocks.append(nn.ReLU())
        self.net = nn.Sequential(*blocks)

    def forward(self, images: Tensor) -> Tensor:
        return self.net(images)


class EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.ReLU(), nn.Linear(4 * dim, dim))

    def forward(self, x: Tensor, pos: Tensor) -> Tensor:
        h = self.norm1(x)
        attn, _ = self.attn(h + pos, h + pos, h, need_weights=False)
        x = x + attn
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.ReLU(), nn.Linear(4 * dim, dim))

    def forward(self, q: Tensor, query_pos: Tensor, memory: Tensor, mem_pos: Tensor) -> Tensor:
        h = self.norm1(q)
        attn, _ = self.self_attn(h + query_pos, h + query_pos, h, need_weights=False)
        q = q + attn
        h = self.norm2(q)
        attn, _ = self.cross_attn(h + query_pos, memory + mem_pos, memory, need_weights=False)
        q = q + attn
        return q + self.ffn(self.norm3(q))


class MetaDetector(nn.Module):
    """Feature extractor + aggregation-aware encoder + set-prediction decoder."""

    def __init__(self, config: DetectorConfig, num_dataset_classes: int = 12):
        super().__init__()
        if not 1 <= config.cam_placement <= config.enc_layers:
            raise ValueError(
                f"cam_placement {config.cam_placement} outside 1..{config.enc_layers}"
            )
        self.config = config
        d = config.dim
        self.extractor = FeatureExtractor(d, config.stride)
        self.cam = CorrelationalAggregation(config.cam_config())
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.heads)
            for _ in range(config.enc_layers - (1 if config.cam_enabled else 0))
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, config.heads) for _ in range(config.dec_layers)
        )
        self.query_embed = nn.Embedding(config.num_queries, d)
        self.head_norm = nn.LayerNorm(d)
        self.class_head = nn.Linear(d, config.max_support_classes)
        self.box_head = nn.Sequential(
            nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d), nn.ReLU(), nn.Linear(d, 4)
        )
        # learnable per-dataset-class embeddings for the prototype cosine loss
        self.class_embeddings = nn.Parameter(torch.empty(num_dataset_classes, d))
        nn.init.normal_(self.class_embeddings, std=0.02)
        # bias class logits toward background at init so focal loss starts calm
        nn.init.constant_(self.class_head.bias, -2.0)

    @property
    def dtype(self) -> torch.dtype:
        return self.class_head.weight.dtype

    def extract_features(self, images: Tensor) -> tuple[Tensor, tuple[int, int]]:
        """(B, 3, H, W) images -> (B, HW/256, d) tokens plus the grid shape."""
        if images.shape[-1] % self.config.stride or images.shape[-2] % self.config.stride:
            raise ImageTooSmall(
                f"image size {tuple(images.shape[-2:])} not divisible by stride "
                f"{self.config.stride}"
            )
        fmap = self.extractor(images)
        b, d, h, w = fmap.shape
        return fmap.permute(0, 2, 3, 1).reshape(b, h * w, d), (h, w)

    def build_prototypes(
        self, supports: list[list[SupportExample]]
    ) -> Tensor:
        """Extract one prototype per support class from its K examples.

        Returns (C+1, d) rows aligned with encoding indices when background
        modeling is on, else (C, d).
        """
        per_class = []
        for shots in supports:
            feats = []
            for ex in shots:
                img = image_to_tensor(ex.image.image, self.dtype)
                tokens, (h, w) = self.extract_features(img[None])
                fmap = tokens.reshape(h, w, self.config.dim)
                box = torch.tensor(ex.instance_box.xyxy(), dtype=self.dtype)
                feats.append((fmap, box))
            per_class.append(feats)
        return self.cam.extract_prototypes(per_class)

    def task_encodings(self, num_classes: int) -> Tensor:
        table = make_task_encodings(num_classes, self.config.dim, dtype=self.dtype)
        return table if self.config.model_background else table[1:]

    def forward(
        self, images: Tensor, prototypes: Tensor, encodings: Tensor
    ) -> tuple[list[Tensor], list[Tensor]]:
        """Per-decoder-layer predictions for a batch of query images.

        Returns D lists of (B, N, C) logits and (B, N, 4) cxcywh boxes in
        (0,1), where C is the episode's number of support classes.
        """
        cfg = self.config
        num_classes = prototypes.shape[0] - (1 if cfg.model_background and cfg.cam_enabled else 0)
        if num_classes > cfg.max_support_classes:
            raise ShapeMismatch(
                f"{num_classes} support classes exceed head width {cfg.max_support_classes}"
            )
        tokens, (h, w) = self.extract_features(images)
        pos = grid_positional_encoding(h, w, cfg.dim, dtype=tokens.dtype)[None]

        plain = iter(self.encoder)
        for layer_idx in range(1, cfg.enc_layers + 1):
            if cfg.cam_enabled and layer_idx == cfg.cam_placement:
                tokens = self.cam(tokens, prototypes, encodings)
            elif not cfg.cam_enabled and layer_idx == cfg.cam_placement:
                # aggregation ablation: single-class feature reweighting
                tokens = tokens * torch.sigmoid(prototypes[-1])
                tokens = next(plain)(tokens, pos)
            else:
                tokens = next(plain)(tokens, pos)

        b = tokens.shape[0]
        query_pos = self.query_embed.weight[None].expand(b, -1, -1)
        q = torch.zeros_like(query_pos)
        layer_logits, layer_boxes = [], []
        for layer in self.decoder:
            q = layer(q, query_pos, tokens, pos)
            out = self.head_norm(q)
            layer_logits.append(self.class_head(out)[..., :num_classes])
            layer_boxes.append(torch.sigmoid(self.box_head(out)))
        return layer_logits, layer_boxes


@dataclass(frozen=True)
class Detection:
    class_id: ClassId
    score: float
    box: Box


def image_to_tensor(image: np.ndarray, dtype: torch.dtype = torch.float32) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).to(dtype)


@torch.no_grad()
def precompute_prototypes(
    model: MetaDetector,
    support_sets: dict[ClassId, list[SupportExample]],
    class_order: list[ClassId],
) -> tuple[Tensor, ChiMap]:
    """Prototype rows for a fixed class order, reusable across query images."""
    missing = [c for c in class_order if not support_sets.get(c)]
    if missing:
        raise MissingClassSupport(f"no support examples for classes {missing}")
    prototypes = model.build_prototypes([list(support_sets[c]) for c in class_order])
    return prototypes, build_encoding_map(class_order)


@torch.no_grad()
def detect(
    model: MetaDetector,
    image: np.ndarray,
    prototypes: Tensor,
    chi: ChiMap,
    threshold: float = 0.25,
    encodings: Tensor | None = None,
) -> list[Detection]:
    """Threshold-only decoding of the final layer; no NMS."""
    if encodings is None:
        encodings = model.task_encodings(chi.num_classes)
    tensor = image_to_tensor(image, model.dtype)
    layer_logits, layer_boxes = model(tensor[None], prototypes, encodings)
    scores = torch.sigmoid(layer_logits[-1][0])  # (N, C)
    boxes = layer_boxes[-1][0]
    out = []
    for slot, col in zip(*torch.where(scores > threshold)):
        cx, cy, w_, h_ = boxes[slot].tolist()
        box = Box(
            cx=min(max(cx, 0.0), 1.0),
            cy=min(max(cy, 0.0), 1.0),
            w=min(max(w_, 1e-6), 1.0),
            h=min(max(h_, 1e-6), 1.0),
        )
        out.append(
            Detection(
                class_id=chi.from_index(int(col) + 1),
                score=float(scores[slot, col]),
                box=box,
            )
        )
    out.sort(key=lambda det: -det.score)
    return out
