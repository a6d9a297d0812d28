"""Core domain types: boxes, annotations, images, episodes.

All types are immutable after construction and validate their invariants
eagerly, so invalid data is rejected at the boundary rather than deep inside
training code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import (
    BoxOutOfBounds,
    DuplicateSupportClass,
    ImageTooSmall,
    ShotCountMismatch,
    ValidationError,
)

if TYPE_CHECKING:
    from .targets import ChiMap

ClassId = int

MIN_IMAGE_SIZE = 64


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized center-size form, relative to image size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise BoxOutOfBounds(f"center ({self.cx}, {self.cy}) outside [0,1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise BoxOutOfBounds(f"size ({self.w}, {self.h}) outside (0,1]")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )


@dataclass(frozen=True)
class Annotation:
    class_id: ClassId
    box: Box

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be non-negative, got {self.class_id}")


@dataclass(frozen=True)
class LabeledImage:
    """An H x W x 3 float image in [0,1] with its ground-truth annotations."""

    image: np.ndarray
    annotations: tuple[Annotation, ...] = ()

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"expected HxWx3 image, got shape {self.image.shape}")
        h, w = self.image.shape[:2]
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ImageTooSmall(f"image {h}x{w} below minimum {MIN_IMAGE_SIZE}")
        object.__setattr__(self, "annotations", tuple(self.annotations))

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class SupportExample:
    """A support image together with the single instance box to pool from."""

    image: LabeledImage
    instance_box: Box

    def __post_init__(self):
        x0, y0, x1, y1 = self.instance_box.xyxy()
        # allow tiny float spill from normalization
        if x0 < -1e-9 or y0 < -1e-9 or x1 > 1 + 1e-9 or y1 > 1 + 1e-9:
            raise BoxOutOfBounds(f"instance_box {self.instance_box} outside image bounds")


@dataclass(frozen=True)
class ClassSplit:
    base_classes: frozenset[ClassId]
    novel_classes: frozenset[ClassId]

    def __post_init__(self):
        object.__setattr__(self, "base_classes", frozenset(self.base_classes))
        object.__setattr__(self, "novel_classes", frozenset(self.novel_classes))
        overlap = self.base_classes & self.novel_classes
        if overlap:
            raise ValidationError(f"base and novel classes overlap: {sorted(overlap)}")

    @property
    def all_classes(self) -> frozenset[ClassId]:
        return self.base_classes | self.novel_classes


@dataclass(frozen=True)
class Episode:
    """One meta-learning task: query images plus C support classes with K shots each."""

    query_images: tuple[LabeledImage, ...]
    support_classes: tuple[ClassId, ...]
    support_sets: Mapping[ClassId, tuple[SupportExample, ...]]
    encoding_map: "ChiMap"
    shots: int

    def __post_init__(self):
        object.__setattr__(self, "query_images", tuple(self.query_images))
        object.__setattr__(self, "support_classes", tuple(self.support_classes))
        object.__setattr__(
            self,
            "support_sets",
            {c: tuple(v) for c, v in self.support_sets.items()},
        )

    @property
    def num_classes(self) -> int:
        return len(self.support_classes)


def validate_episode(e: Episode) -> None:
    """Check every Episode invariant; raises a named error on the first failure."""
    if len(set(e.support_classes)) != len(e.support_classes):
        raise DuplicateSupportClass(f"support_classes {e.support_classes} has duplicates")
    if set(e.support_sets.keys()) != set(e.support_classes):
        raise ShotCountMismatch(
            f"support_sets classes {sorted(e.support_sets)} != "
            f"support_classes {sorted(e.support_classes)}"
        )
    for c, shots in e.support_sets.items():
        if len(shots) != e.shots:
            raise ShotCountMismatch(
                f"class {c}: expected {e.shots} support examples, got {len(shots)}"
            )
    if tuple(e.encoding_map.classes) != e.support_classes:
        raise ValidationError(
            f"encoding_map domain {e.encoding_map.classes} != support_classes"
        )
    for img in e.query_images:
        for ann in img.annotations:
            # Box invariants are enforced at construction; re-check bounds here
            # so a hand-built episode with a tampered box still fails loudly.
            x0, y0, x1, y1 = ann.box.xyxy()
            if x0 < -1e-9 or y0 < -1e-9 or x1 > 1 + 1e-9 or y1 > 1 + 1e-9:
                raise BoxOutOfBounds(f"annotation box {ann.box} out of bounds")
