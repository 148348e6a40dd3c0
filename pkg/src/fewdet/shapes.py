"""Procedural rendering of a 12-class geometric shapes benchmark.

Every class is a distinct silhouette; instances vary in position, size,
color and a translation-covariant texture derived from a per-instance seed,
so the same instance renders identically wherever it is placed.  Rendering
is fully deterministic given (placements, seed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .roi import RoIBox

SHAPE_KINDS = (
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "diamond",
    "star",
    "bar",
    "lshape",
    "tshape",
    "crescent",
    "plus",
)
NUM_SHAPE_CLASSES = len(SHAPE_KINDS)


@dataclass
class ShapeSpec:
    """Class identity plus the sampling knobs for one shape category."""

    class_id: int
    texture_seed: int = 0
    scale_range: tuple = (0.15, 0.32)  # full side as a fraction of the image side
    allow_occlusion: bool = True

    @property
    def kind(self):
        return SHAPE_KINDS[self.class_id]


@dataclass
class PlacedShape:
    """A concrete instance: class, center, half-extent and appearance seed."""

    class_id: int
    cx: float
    cy: float
    size: float  # half extent in pixels
    appearance_seed: int = 0


def _silhouette(kind, dx, dy, r):
    """Boolean membership for each shape family, in center-relative coords."""
    ax, ay = np.abs(dx), np.abs(dy)
    inside_box = np.maximum(ax, ay) <= r
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return inside_box
    if kind == "triangle":
        u = (dy + r) / (2 * r)
        return (ay <= r) & (ax <= r * np.clip(u, 0, 1))
    if kind == "cross":
        t = 0.35 * r
        return inside_box & ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t))
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "diamond":
        return ax + ay <= r
    if kind == "star":
        return np.sqrt(ax / r) + np.sqrt(ay / r) <= 1.0
    if kind == "bar":
        return (ax <= r) & (ay <= 0.35 * r)
    if kind == "lshape":
        u = (dx + r) / (2 * r)
        v = (dy + r) / (2 * r)
        return inside_box & ((u <= 0.45) | (v >= 0.55))
    if kind == "tshape":
        u = (dx + r) / (2 * r)
        v = (dy + r) / (2 * r)
        return inside_box & ((v <= 0.4) | (np.abs(u - 0.5) <= 0.22))
    if kind == "crescent":
        d2 = dx * dx + dy * dy
        off = (dx - 0.45 * r) ** 2 + dy * dy
        return (d2 <= r * r) & (off >= (0.72 * r) ** 2)
    if kind == "plus":
        t = 0.32 * r
        return inside_box & ((ax <= t) | (ay <= t))
    raise ValueError(f"unknown shape kind {kind!r}")


def shape_mask(placed, size):
    """Boolean occupancy of one placed shape on a size x size canvas."""
    xs = np.arange(size) + 0.5
    dx = xs[None, :] - placed.cx
    dy = xs[:, None] - placed.cy
    return _silhouette(SHAPE_KINDS[placed.class_id], dx, dy, placed.size)


def tight_box(mask, class_id=None):
    """Smallest box covering the true pixels; None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return RoIBox(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1), class_id=class_id)


def _fill(placed, mask, size):
    """Per-instance color plus a low-frequency texture tied to the shape center."""
    rng = np.random.default_rng(placed.appearance_seed)
    color = 0.35 + 0.6 * rng.random(3)
    fx, fy = rng.uniform(0.2, 0.9, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    xs = np.arange(size) + 0.5
    dx = xs[None, :] - placed.cx
    dy = xs[:, None] - placed.cy
    texture = 0.85 + 0.15 * np.sin(fx * dx + fy * dy + phase)
    return color[:, None, None] * texture[None] * mask[None]


def render_image(placements, size, seed):
    """Draw shapes back-to-front over a noisy background.

    Returns (image [3, size, size] in [0, 1], tight ground-truth boxes).
    Raises if no shapes are requested: every query needs at least one object.
    """
    if not placements:
        raise ValueError("render_image requires at least one shape placement")
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.08, 0.16)
    canvas = np.clip(base + 0.03 * rng.standard_normal((3, size, size)), 0.0, 0.3)
    boxes = []
    for placed in placements:
        mask = shape_mask(placed, size)
        box = tight_box(mask, class_id=placed.class_id)
        if box is None:
            raise ValueError(f"shape {placed} renders no pixels on a {size}x{size} canvas")
        fill = _fill(placed, mask, size)
        canvas = np.where(mask[None], fill, canvas)
        boxes.append(box)
    return np.clip(canvas, 0.0, 1.0), boxes


def _placement_box(p):
    return np.array([p.cx - p.size, p.cy - p.size, p.cx + p.size, p.cy + p.size])


def place_shapes(rng, class_ids, size, scale_range=(0.15, 0.32), occlude=False, max_retries=50, sizes=None):
    """Sample non-overlapping placements; with ``occlude`` one pair overlaps.

    Boxes keep a small margin to the border.  The occluding shape (when
    requested) is steered next to an earlier one so it covers up to half of
    it; anything beyond the overlap budget is resampled, and after
    ``max_retries`` failed rounds an error is raised.  ``sizes`` pins the
    half extents instead of sampling them from ``scale_range``.
    """
    for _ in range(max_retries):
        placements = []
        ok = True
        occluder = int(rng.integers(1, len(class_ids))) if (occlude and len(class_ids) > 1) else -1
        for i, cid in enumerate(class_ids):
            half = sizes[i] if sizes is not None else 0.5 * size * rng.uniform(*scale_range)
            half = min(half, size / 2.0 - 2.0)
            placed = None
            for _ in range(max_retries):
                if i == occluder:
                    target = placements[int(rng.integers(0, len(placements)))]
                    ang = rng.uniform(0, 2 * np.pi)
                    dist = (target.size + half) * rng.uniform(0.55, 0.95)
                    cx = float(np.clip(target.cx + dist * np.cos(ang), half + 1, size - half - 1))
                    cy = float(np.clip(target.cy + dist * np.sin(ang), half + 1, size - half - 1))
                else:
                    cx = rng.uniform(half + 1, size - half - 1)
                    cy = rng.uniform(half + 1, size - half - 1)
                cand = np.array([cx - half, cy - half, cx + half, cy + half])
                fracs = [_box_overlap_frac(cand, _placement_box(p)) for p in placements]
                limit = 0.5 if i == occluder else 0.02
                if all(f <= limit for f in fracs):
                    placed = PlacedShape(cid, cx, cy, half, appearance_seed=int(rng.integers(0, 2**31)))
                    break
            if placed is None:
                ok = False
                break
            placements.append(placed)
        if ok:
            return placements
    raise ValueError(f"could not place {len(class_ids)} shapes within the occlusion budget")


def _box_overlap_frac(a, b):
    """Intersection area over the smaller box area."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / max(area, 1e-9)
