"""Class-agnostic target construction.

Each episode assigns its sampled support classes to encoding indices 1..C
(index 0 is reserved for background). Ground-truth annotations are rewritten
into fixed-size slot sets over those indices, and predictions are mapped back
to real class ids at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .core import Annotation, Box, ClassId
from .errors import DuplicateSupportClass, TooManyObjects, UnknownEncodingIndex

EMPTY = 0  # slot label for "no object"; also the background encoding index


@dataclass(frozen=True)
class ChiMap:
    """Injective map from support class ids to encoding indices 1..C."""

    classes: tuple[ClassId, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise DuplicateSupportClass(f"duplicate classes in {self.classes}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_index(self, class_id: ClassId) -> int:
        """Encoding index of a support class (1-based); KeyError if absent."""
        try:
            return self.classes.index(class_id) + 1
        except ValueError:
            raise KeyError(class_id) from None

    def from_index(self, index: int) -> ClassId:
        if not 1 <= index <= len(self.classes):
            raise UnknownEncodingIndex(
                f"encoding index {index} outside 1..{len(self.classes)}"
            )
        return self.classes[index - 1]

    def __contains__(self, class_id: ClassId) -> bool:
        return class_id in self.classes


@dataclass(frozen=True)
class DetectionTargets:
    """N slots of (encoding label, box); label EMPTY marks a padded slot."""

    labels: Tensor  # (N,) long, values in {0, 1..C}
    boxes: Tensor  # (N, 4) cxcywh; rows with label EMPTY are zeros

    def __post_init__(self):
        assert self.labels.shape[0] == self.boxes.shape[0]

    @property
    def num_slots(self) -> int:
        return self.labels.shape[0]

    @property
    def num_objects(self) -> int:
        return int((self.labels != EMPTY).sum())


def build_encoding_map(support_classes: Sequence[ClassId]) -> ChiMap:
    """i-th sampled class -> encoding index i (1-based), order-sensitive."""
    return ChiMap(tuple(support_classes))


def remap_targets(
    annotations: Sequence[Annotation],
    chi: ChiMap,
    num_slots: int,
    dtype: torch.dtype = torch.float32,
) -> DetectionTargets:
    """Rewrite ground truth into encoding-labelled slots, dropping classes
    outside the support set. Kept objects occupy the lowest slots in
    ground-truth order; the matcher makes the slot order irrelevant."""
    kept = [ann for ann in annotations if ann.class_id in chi]
    if len(kept) > num_slots:
        raise TooManyObjects(f"{len(kept)} objects exceed {num_slots} slots")
    labels = torch.full((num_slots,), EMPTY, dtype=torch.long)
    boxes = torch.zeros(num_slots, 4, dtype=dtype)
    for slot, ann in enumerate(kept):
        labels[slot] = chi.to_index(ann.class_id)
        boxes[slot] = torch.tensor(ann.box.as_tuple(), dtype=dtype)
    return DetectionTargets(labels=labels, boxes=boxes)


def unmap_predictions(
    raw: Sequence[tuple[int, float, Box]], chi: ChiMap
) -> list[tuple[ClassId, float, Box]]:
    """Replace encoding indices with real class ids; index 0 never reports."""
    return [(chi.from_index(idx), score, box) for idx, score, box in raw]
