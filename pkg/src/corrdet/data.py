"""Synthetic shape scenes: generation, on-disk format, and episodic sampling.

Twelve classes pair six shapes with two appearance styles, so visually
correlated class pairs (ring-filled vs. circle-filled, etc.) exist by
construction. Scenes are reproducible from (seed, split, index) alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import Annotation, Box, ClassId, ClassSplit, Episode, LabeledImage, SupportExample
from .errors import InsufficientClasses, InsufficientShots
from .targets import build_encoding_map

SHAPES = ("circle", "square", "triangle", "star", "cross", "ring")
STYLES = ("filled", "outline")
CLASS_NAMES = tuple(f"{shape}-{style}" for shape in SHAPES for style in STYLES)
NUM_CLASSES = len(CLASS_NAMES)
DEFAULT_NOVEL = ("ring-filled", "star-outline", "cross-filled")

SPLIT_BASE = "base"
SPLIT_NOVEL = "novel"
SPLIT_TEST = "test"
_SPLIT_IDS = {SPLIT_BASE: 0, SPLIT_NOVEL: 1, SPLIT_TEST: 2}


def class_id(name: str) -> ClassId:
    return CLASS_NAMES.index(name)


def default_class_split() -> ClassSplit:
    novel = frozenset(class_id(n) for n in DEFAULT_NOVEL)
    return ClassSplit(
        base_classes=frozenset(range(NUM_CLASSES)) - novel, novel_classes=novel
    )


@dataclass(frozen=True)
class ShapeWorldConfig:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 4
    scale_range: tuple[float, float] = (0.14, 0.30)
    color_jitter: float = 0.15
    noise_level: float = 0.03
    seed: int = 0
    num_base_scenes: int = 2000
    num_novel_scenes: int = 400
    num_test_scenes: int = 200
    novel_class_names: tuple[str, ...] = DEFAULT_NOVEL

    def class_split(self) -> ClassSplit:
        novel = frozenset(class_id(n) for n in self.novel_class_names)
        if len(novel) < 2:
            raise ValueError("need at least 2 novel classes")
        return ClassSplit(
            base_classes=frozenset(range(NUM_CLASSES)) - novel, novel_classes=novel
        )


_PALETTE = np.array(
    [
        (0.85, 0.25, 0.25),
        (0.25, 0.60, 0.85),
        (0.30, 0.75, 0.35),
        (0.90, 0.75, 0.20),
        (0.70, 0.35, 0.80),
        (0.90, 0.50, 0.20),
    ]
)


def _polygon(kind: str, cx: float, cy: float, r: float, angle: float) -> list[tuple[float, float]]:
    if kind == "triangle":
        angles = [angle + math.pi / 2 + k * 2 * math.pi / 3 for k in range(3)]
        return [(cx + r * math.cos(a), cy - r * math.sin(a)) for a in angles]
    if kind == "star":
        pts = []
        for k in range(10):
            rad = r if k % 2 == 0 else 0.45 * r
            a = angle + math.pi / 2 + k * math.pi / 5
            pts.append((cx + rad * math.cos(a), cy - rad * math.sin(a)))
        return pts
    if kind == "cross":
        t = 0.36 * r  # arm half-thickness
        base = [
            (-t, -r), (t, -r), (t, -t), (r, -t), (r, t), (t, t),
            (t, r), (-t, r), (-t, t), (-r, t), (-r, -t), (-t, -t),
        ]
        ca, sa = math.cos(angle), math.sin(angle)
        return [(cx + x * ca - y * sa, cy + x * sa + y * ca) for x, y in base]
    raise ValueError(kind)


def _draw_shape(mask: Image.Image, shape: str, style: str, cx, cy, r, angle) -> None:
    draw = ImageDraw.Draw(mask)
    outline_w = max(2, int(round(r * 0.18)))
    if shape in ("circle", "ring", "square"):
        bbox = [cx - r, cy - r, cx + r, cy + r]
        fn = draw.ellipse if shape in ("circle", "ring") else draw.rectangle
        if style == "filled" and shape != "ring":
            fn(bbox, fill=255)
        elif shape == "ring":
            inner = 0.55 * r
            ibox = [cx - inner, cy - inner, cx + inner, cy + inner]
            if style == "filled":
                draw.ellipse(bbox, fill=255)
                draw.ellipse(ibox, fill=0)
            else:
                draw.ellipse(bbox, outline=255, width=outline_w)
                draw.ellipse(ibox, outline=255, width=outline_w)
        else:
            fn(bbox, outline=255, width=outline_w)
    else:
        pts = _polygon(shape, cx, cy, r, angle)
        if style == "filled":
            draw.polygon(pts, fill=255)
        else:
            draw.polygon(pts, outline=255, width=outline_w)


def render_instance_mask(
    shape: str, style: str, size: int, cx: float, cy: float, r: float, angle: float
) -> np.ndarray:
    mask = Image.new("L", (size, size), 0)
    _draw_shape(mask, shape, style, cx, cy, r, angle)
    return np.asarray(mask) > 0


def _tight_box(mask: np.ndarray, size: int) -> Box:
    ys, xs = np.nonzero(mask)
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    return Box(
        cx=(x0 + x1) / (2 * size),
        cy=(y0 + y1) / (2 * size),
        w=(x1 - x0) / size,
        h=(y1 - y0) / size,
    )


def generate_scene(
    rng: np.random.Generator, config: ShapeWorldConfig, class_pool: Sequence[ClassId]
) -> LabeledImage:
    """Render 1..max_objects shapes from ``class_pool`` with tight boxes."""
    size = config.image_size
    image = np.full((size, size, 3), 0.5, dtype=np.float64)
    image += rng.normal(0, config.noise_level, image.shape)

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    annotations: list[Annotation] = []
    placed_masks: list[np.ndarray] = []
    attempts = 0
    while len(annotations) < n_objects and attempts < 60:
        attempts += 1
        cid = int(rng.choice(list(class_pool)))
        shape, style = CLASS_NAMES[cid].split("-")
        r = rng.uniform(*config.scale_range) * size  # radius in px
        cx = rng.uniform(r + 2, size - r - 2)
        cy = rng.uniform(r + 2, size - r - 2)
        angle = rng.uniform(0, 2 * math.pi) if shape in ("triangle", "star", "cross") else 0.0
        mask = render_instance_mask(shape, style, size, cx, cy, r, angle)
        if not mask.any():
            continue
        if any((mask & prev).sum() > 0.15 * mask.sum() for prev in placed_masks):
            continue
        color = _PALETTE[rng.integers(len(_PALETTE))]
        color = np.clip(color + rng.uniform(-1, 1, 3) * config.color_jitter, 0, 1)
        image[mask] = color
        placed_masks.append(mask)
        annotations.append(Annotation(class_id=cid, box=_tight_box(mask, size)))

    image = np.clip(image, 0, 1).astype(np.float32)
    return LabeledImage(image=image, annotations=tuple(annotations))


def _scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_IDS[split], index])


@dataclass
class SceneRecord:
    index: int
    split: str
    file_name: str
    annotations: tuple[Annotation, ...]


@dataclass
class FewShotDataset:
    """On-disk dataset handle: scene records plus lazy image loading."""

    root: Path
    config: ShapeWorldConfig
    split: ClassSplit
    records: list[SceneRecord]

    def scenes(self, split: str) -> list[SceneRecord]:
        return [r for r in self.records if r.split == split]

    def load_image(self, record: SceneRecord) -> LabeledImage:
        path = self.root / "images" / record.file_name
        arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
        return LabeledImage(image=arr, annotations=record.annotations)

    def instance_index(self, split: str) -> dict[ClassId, list[tuple[int, int]]]:
        """class id -> list of (record position, annotation index) for a split."""
        index: dict[ClassId, list[tuple[int, int]]] = {}
        for pos, rec in enumerate(self.records):
            if rec.split != split:
                continue
            for k, ann in enumerate(rec.annotations):
                index.setdefault(ann.class_id, []).append((pos, k))
        return index


def build_dataset(config: ShapeWorldConfig, out_path: str | Path) -> FewShotDataset:
    """Generate and write the dataset: images/, annotations.json, manifest.json."""
    root = Path(out_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    split = config.class_split()
    base_pool = sorted(split.base_classes)
    full_pool = sorted(split.all_classes)

    plan = [
        (SPLIT_BASE, config.num_base_scenes, base_pool),
        (SPLIT_NOVEL, config.num_novel_scenes, full_pool),
        (SPLIT_TEST, config.num_test_scenes, full_pool),
    ]
    records: list[SceneRecord] = []
    images_json, anns_json = [], []
    image_id = 0
    ann_id = 0
    for split_name, count, pool in plan:
        for i in range(count):
            scene = generate_scene(_scene_rng(config.seed, split_name, i), config, pool)
            file_name = f"{split_name}_{i:05d}.png"
            Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(
                root / "images" / file_name
            )
            records.append(
                SceneRecord(
                    index=image_id,
                    split=split_name,
                    file_name=file_name,
                    annotations=scene.annotations,
                )
            )
            images_json.append(
                {
                    "id": image_id,
                    "file_name": file_name,
                    "width": config.image_size,
                    "height": config.image_size,
                    "split": split_name,
                }
            )
            for ann in scene.annotations:
                anns_json.append(
                    {
                        "id": ann_id,
                        "image_id": image_id,
                        "category_id": ann.class_id,
                        "bbox": list(ann.box.as_tuple()),
                        "bbox_format": "cxcywh_norm",
                    }
                )
                ann_id += 1
            image_id += 1

    categories = [
        {
            "id": cid,
            "name": CLASS_NAMES[cid],
            "split": "novel" if cid in split.novel_classes else "base",
        }
        for cid in range(NUM_CLASSES)
    ]
    with open(root / "annotations.json", "w") as f:
        json.dump(
            {"images": images_json, "annotations": anns_json, "categories": categories},
            f,
            sort_keys=True,
            indent=1,
        )
    with open(root / "manifest.json", "w") as f:
        json.dump({"config": asdict(config), "format": 1}, f, sort_keys=True, indent=1)
    return FewShotDataset(root=root, config=config, split=split, records=records)


def load_dataset(path: str | Path) -> FewShotDataset:
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    cfg_dict = dict(manifest["config"])
    cfg_dict["scale_range"] = tuple(cfg_dict["scale_range"])
    cfg_dict["novel_class_names"] = tuple(cfg_dict["novel_class_names"])
    config = ShapeWorldConfig(**cfg_dict)
    with open(root / "annotations.json") as f:
        doc = json.load(f)
    anns_by_image: dict[int, list[Annotation]] = {}
    for a in doc["annotations"]:
        anns_by_image.setdefault(a["image_id"], []).append(
            Annotation(class_id=a["category_id"], box=Box(*a["bbox"]))
        )
    records = [
        SceneRecord(
            index=img["id"],
            split=img["split"],
            file_name=img["file_name"],
            annotations=tuple(anns_by_image.get(img["id"], [])),
        )
        for img in sorted(doc["images"], key=lambda im: im["id"])
    ]
    return FewShotDataset(root=root, config=config, split=config.class_split(), records=records)


@dataclass(frozen=True)
class KShotSupportSet:
    """Exactly K recorded support instances per class in scope."""

    shots: int
    seed: int
    instances: dict[ClassId, tuple[tuple[int, int], ...]]  # (record pos, ann idx)

    def classes(self) -> list[ClassId]:
        return sorted(self.instances)


def _support_example(dataset: FewShotDataset, pos: int, ann_idx: int) -> SupportExample:
    rec = dataset.records[pos]
    img = dataset.load_image(rec)
    return SupportExample(image=img, instance_box=rec.annotations[ann_idx].box)


def build_finetune_set(
    dataset: FewShotDataset, shots: int, rng: np.random.Generator, seed: int = 0
) -> KShotSupportSet:
    """Balanced K-shot set over base and novel classes: novel instances come
    from the novel pool, base classes are subsampled to K as well."""
    split = dataset.split
    novel_index = dataset.instance_index(SPLIT_NOVEL)
    base_index = dataset.instance_index(SPLIT_BASE)
    instances: dict[ClassId, tuple[tuple[int, int], ...]] = {}
    for cid in sorted(split.all_classes):
        pool = novel_index.get(cid, []) if cid in split.novel_classes else base_index.get(cid, [])
        if len(pool) < shots:
            raise InsufficientShots(
                f"class {cid} ({CLASS_NAMES[cid]}): {len(pool)} instances < K={shots}"
            )
        picks = rng.choice(len(pool), size=shots, replace=False)
        instances[cid] = tuple(pool[int(i)] for i in picks)
    return KShotSupportSet(shots=shots, seed=seed, instances=instances)


def support_examples(
    dataset: FewShotDataset, support_set: KShotSupportSet, cid: ClassId
) -> list[SupportExample]:
    return [_support_example(dataset, pos, k) for pos, k in support_set.instances[cid]]


def sample_episode(
    dataset: FewShotDataset,
    stage: str,
    num_classes: int,
    shots: int,
    rng: np.random.Generator,
    num_queries: int = 2,
    support_set: KShotSupportSet | None = None,
) -> Episode:
    """Draw one episode for base training or few-shot fine-tuning.

    Base stage: classes and everything else from the base split, with support
    source images never appearing as queries in the same episode. Finetune
    stage: classes from base + novel, supports restricted to the K-shot set,
    queries drawn from the K-shot scenes (which may include support sources —
    the few-shot stage trains on the registered shots themselves).
    """
    if stage == "base":
        index = dataset.instance_index(SPLIT_BASE)
        class_scope = sorted(set(index) & dataset.split.base_classes)
    elif stage == "finetune":
        if support_set is None:
            raise ValueError("finetune stage requires a K-shot support set")
        class_scope = support_set.classes()
    else:
        raise ValueError(f"unknown stage {stage!r}")
    if len(class_scope) < num_classes:
        raise InsufficientClasses(
            f"{len(class_scope)} classes available, episode needs {num_classes}"
        )

    for _ in range(50):
        chosen = [
            class_scope[int(i)]
            for i in rng.choice(len(class_scope), size=num_classes, replace=False)
        ]
        if stage == "base":
            # queries: prefer scenes containing a chosen class so episodes
            # carry positives, but leave room for background-only queries
            scene_pool = [pos for c in chosen for pos, _ in index[c]]
            all_pool = [i for i, r in enumerate(dataset.records) if r.split == SPLIT_BASE]
            query_pos: list[int] = []
            for _q in range(num_queries):
                pool = scene_pool if rng.random() < 0.75 and scene_pool else all_pool
                query_pos.append(int(pool[int(rng.integers(len(pool)))]))
            support_sets = {}
            ok = True
            for c in chosen:
                candidates = [(p, k) for p, k in index[c] if p not in query_pos]
                if len(candidates) < shots:
                    ok = False
                    break
                picks = rng.choice(len(candidates), size=shots, replace=False)
                support_sets[c] = tuple(
                    _support_example(dataset, *candidates[int(i)]) for i in picks
                )
            if not ok:
                continue
        else:
            # supports are exactly the registered K instances of each chosen
            # class; queries come from the K-shot scenes (the few-shot stage
            # trains on the registered shots themselves, so support sources
            # may reappear as queries)
            support_sets = {
                c: tuple(_support_example(dataset, p, k) for p, k in support_set.instances[c])
                for c in chosen
            }
            pool = sorted(
                {p for insts in support_set.instances.values() for p, _ in insts}
            )
            if not pool:
                continue
            chosen_set = set(chosen)
            positives = [
                p
                for p in pool
                if any(a.class_id in chosen_set for a in dataset.records[p].annotations)
            ]
            query_pos = []
            for _q in range(num_queries):
                src = positives if rng.random() < 0.75 and positives else pool
                query_pos.append(int(src[int(rng.integers(len(src)))]))
        queries = tuple(dataset.load_image(dataset.records[p]) for p in query_pos)
        return Episode(
            query_images=queries,
            support_classes=tuple(chosen),
            support_sets=support_sets,
            encoding_map=build_encoding_map(chosen),
            shots=shots,
        )
    raise InsufficientShots(
        f"could not assemble an episode with C={num_classes}, K={shots} "
        "without query/support leakage"
    )
