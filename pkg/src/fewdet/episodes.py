"""Episodic sampling over the synthetic shapes benchmark.

Classes split 8 base / 4 novel with three rotating split definitions.
Meta-training episodes draw query objects and fresh support images from the
base classes only; fine-tuning episodes draw every support instance, and the
query objects themselves, from a fixed k-shot pool so exactly k instances
per class exist for the whole phase.  Appearance (color, texture, size) is
part of an instance's identity; only its position is resampled.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigurationError
from .roi import RoIBox
from .shapes import NUM_SHAPE_CLASSES, PlacedShape, place_shapes, render_image, shape_mask, tight_box

QUERY_SIZE = 96
SUPPORT_SIZE = 64
SCALE_RANGE = (0.15, 0.32)  # object side as a fraction of the query side
OCCLUSION_PROB = 0.3
DISTRACTOR_PROB = 0.3


@dataclass(frozen=True)
class SplitConfig:
    base_classes: tuple
    novel_classes: tuple
    split_id: int

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ConfigurationError("base and novel classes must not intersect")
        if set(self.base_classes) | set(self.novel_classes) != set(range(NUM_SHAPE_CLASSES)):
            raise ConfigurationError("base and novel classes must cover all shape classes")


def make_split(split_id):
    """Three rotating 8/4 splits: split s holds classes [4s, 4s+4) out."""
    if split_id not in (0, 1, 2):
        raise ConfigurationError(f"split_id must be 0, 1 or 2, got {split_id}")
    novel = tuple(range(4 * split_id, 4 * split_id + 4))
    base = tuple(c for c in range(NUM_SHAPE_CLASSES) if c not in novel)
    return SplitConfig(base, novel, split_id)


@dataclass
class SupportExample:
    image: np.ndarray  # [3, S, S]
    mask: np.ndarray  # [1, S, S] binary, union of the target class's boxes
    class_id: int
    gt_boxes: list = field(default_factory=list)  # all boxes, distractors included


@dataclass
class Episode:
    query_image: np.ndarray  # [3, H, W]
    gt_boxes: list  # RoIBox with class_id
    supports: list  # one SupportExample per training class, ordered by class id


@dataclass(frozen=True)
class PoolInstance:
    """One k-shot instance: fixed appearance and size, free position."""

    class_id: int
    appearance_seed: int
    size: float  # half extent in pixels


@dataclass
class ShotBudget:
    k: int
    instances: dict  # class_id -> list[PoolInstance], length exactly k

    def __post_init__(self):
        for cid, lst in self.instances.items():
            if len(lst) != self.k:
                raise ConfigurationError(f"class {cid} has {len(lst)} pooled instances, expected {self.k}")


def build_shot_pool(dataset_seed, split, k, run_index=0):
    """Deterministic k instances per class for one evaluation run."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng([dataset_seed, split.split_id, k, run_index, 0xBEEF])
    instances = {}
    for cid in range(NUM_SHAPE_CLASSES):
        instances[cid] = [
            PoolInstance(
                cid,
                int(rng.integers(0, 2**31)),
                0.5 * QUERY_SIZE * rng.uniform(*SCALE_RANGE),
            )
            for _ in range(k)
        ]
    return ShotBudget(k=k, instances=instances)


def pool_digest(budget):
    """Stable content hash, used to confirm distinct pools across runs."""
    h = hashlib.sha256()
    for cid in sorted(budget.instances):
        for inst in budget.instances[cid]:
            h.update(f"{inst.class_id}:{inst.appearance_seed}:{inst.size:.6f};".encode())
    return h.hexdigest()


def _box_int_mask(box, size):
    """Pixel-center rasterization of one box onto a size x size grid."""
    m = np.zeros((size, size), dtype=bool)
    x1 = max(int(np.ceil(box.x1 - 0.5)), 0)
    y1 = max(int(np.ceil(box.y1 - 0.5)), 0)
    x2 = min(int(np.ceil(box.x2 - 0.5)), size)
    y2 = min(int(np.ceil(box.y2 - 0.5)), size)
    m[y1:y2, x1:x2] = True
    return m


def render_support(class_id, rng, instance=None, other_classes=(), size=SUPPORT_SIZE):
    """One support image: a single target instance plus optional distractor.

    The binary mask is the union of the target class's ground-truth boxes;
    distractor objects of other classes stay masked out.
    """
    if instance is None:
        half = 0.5 * QUERY_SIZE * rng.uniform(*SCALE_RANGE)
        seed = int(rng.integers(0, 2**31))
    else:
        half, seed = instance.size, instance.appearance_seed
    half = min(half, size / 2.0 - 2.0)
    placements = []
    cx = rng.uniform(half + 1, size - half - 1)
    cy = rng.uniform(half + 1, size - half - 1)
    placements.append(PlacedShape(class_id, cx, cy, half, appearance_seed=seed))
    if other_classes and rng.random() < DISTRACTOR_PROB:
        dcid = int(rng.choice(list(other_classes)))
        dhalf = 0.5 * size * rng.uniform(0.18, 0.3)
        for _ in range(20):
            dx = rng.uniform(dhalf + 1, size - dhalf - 1)
            dy = rng.uniform(dhalf + 1, size - dhalf - 1)
            if max(abs(dx - cx), abs(dy - cy)) > half + dhalf + 2:
                placements.append(
                    PlacedShape(dcid, dx, dy, dhalf, appearance_seed=int(rng.integers(0, 2**31)))
                )
                break
    image, boxes = render_image(placements, size, seed=int(rng.integers(0, 2**31)))
    mask = np.zeros((size, size), dtype=bool)
    for b in boxes:
        if b.class_id == class_id:
            mask |= _box_int_mask(b, size)
    return SupportExample(
        image=image, mask=mask[None].astype(np.float64), class_id=class_id, gt_boxes=boxes
    )


class EpisodeSampler:
    """Draws episodes for one phase ('meta_train' or 'fine_tune')."""

    def __init__(self, split, phase, seed, budget=None, occlusion_prob=OCCLUSION_PROB):
        if phase not in ("meta_train", "fine_tune"):
            raise ConfigurationError(f"unknown phase {phase!r}")
        if phase == "fine_tune" and budget is None:
            raise ConfigurationError("fine_tune sampling requires a ShotBudget")
        self.split = split
        self.phase = phase
        self.budget = budget
        self.rng = np.random.default_rng(seed)
        self.occlusion_prob = occlusion_prob
        if phase == "meta_train":
            self.class_ids = tuple(sorted(split.base_classes))
        else:
            self.class_ids = tuple(sorted(split.base_classes + split.novel_classes))
            for cid in self.class_ids:
                if not budget.instances.get(cid):
                    raise ConfigurationError(f"shot pool has no instances for class {cid}")

    def sample(self):
        rng = self.rng
        n_obj = int(rng.integers(1, 4))
        occlude = bool(n_obj > 1 and rng.random() < self.occlusion_prob)
        if self.phase == "meta_train":
            query_classes = [int(rng.choice(self.class_ids)) for _ in range(n_obj)]
            placements = place_shapes(rng, query_classes, QUERY_SIZE, SCALE_RANGE, occlude=occlude)
        else:
            chosen = []
            for _ in range(n_obj):
                cid = int(rng.choice(self.class_ids))
                inst = self.budget.instances[cid][int(rng.integers(0, self.budget.k))]
                chosen.append(inst)
            placements = place_shapes(
                rng,
                [i.class_id for i in chosen],
                QUERY_SIZE,
                SCALE_RANGE,
                occlude=occlude,
                sizes=[i.size for i in chosen],
            )
            for p, inst in zip(placements, chosen):
                p.appearance_seed = inst.appearance_seed
        image, boxes = render_image(placements, QUERY_SIZE, seed=int(rng.integers(0, 2**31)))
        supports = []
        for cid in self.class_ids:
            others = [c for c in self.class_ids if c != cid]
            if self.phase == "meta_train":
                supports.append(render_support(cid, rng, other_classes=others))
            else:
                inst = self.budget.instances[cid][int(rng.integers(0, self.budget.k))]
                supports.append(render_support(cid, rng, instance=inst, other_classes=others))
        return Episode(query_image=image, gt_boxes=boxes, supports=supports)


def support_pairs_from_pool(budget, split, seed):
    """Per-class (image, mask) lists rendered from every pooled instance.

    Used at evaluation time: the k shots per class are all the support data
    the model gets to see.
    """
    rng = np.random.default_rng([seed, 0xCAFE])
    per_class = []
    class_ids = sorted(split.base_classes + split.novel_classes)
    for cid in class_ids:
        pairs = []
        others = [c for c in class_ids if c != cid]
        for inst in budget.instances[cid]:
            ex = render_support(cid, rng, instance=inst, other_classes=others)
            pairs.append((ex.image, ex.mask))
        per_class.append((cid, pairs))
    return per_class


def evaluation_stream(split, dataset_seed, n_images, occlusion_prob=OCCLUSION_PROB):
    """Deterministic evaluation images covering all classes.

    Classes rotate round-robin across images so every class appears; extra
    objects per image are drawn uniformly.
    """
    rng = np.random.default_rng([dataset_seed, split.split_id, 0xE7A1])
    all_classes = sorted(split.base_classes + split.novel_classes)
    for i in range(n_images):
        n_obj = int(rng.integers(1, 4))
        classes = [all_classes[i % len(all_classes)]]
        classes += [int(rng.choice(all_classes)) for _ in range(n_obj - 1)]
        occlude = bool(n_obj > 1 and rng.random() < occlusion_prob)
        placements = place_shapes(rng, classes, QUERY_SIZE, SCALE_RANGE, occlude=occlude)
        image, boxes = render_image(placements, QUERY_SIZE, seed=int(rng.integers(0, 2**31)))
        yield image, boxes


# ---------------------------------------------------------------------------
# optional on-disk export (inspection only; training renders on the fly)


def write_ppm(path, image):
    """8-bit binary portable pixmap (P6: magic, dims, max value, raw RGB)."""
    arr = (np.clip(np.asarray(image), 0, 1) * 255).round().astype(np.uint8)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected [3, H, W] image, got {arr.shape}")
    h, w = arr.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary pixmap (magic {magic!r})")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def export_dataset(out_dir, split, dataset_seed, n_images):
    """Write a test stream as PPM images plus an annotation CSV."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, (image, boxes) in enumerate(evaluation_stream(split, dataset_seed, n_images)):
        name = f"img_{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), image)
        for b in boxes:
            rows.append((i, b.class_id, b.x1, b.y1, b.x2, b.y2))
    with open(os.path.join(out_dir, "annotations.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "class_id", "x1", "y1", "x2", "y2"])
        writer.writerows(rows)
    return len(rows)
