"""Region pooling: RoI Align, bilinear resize, and multi-resolution fusion.

Each proposal is pooled at resolutions 4, 8 and 12; a small attention branch
per resolution (global average pool, two fc layers) scores its pooled map,
the three logits are softmax-normalized, the 4x4 and 12x12 maps are resized
to 8x8 with align-corners bilinear interpolation, and the fused output is
the weighted sum.  Degenerate or out-of-bounds boxes yield defined outputs
plus a status flag instead of raising, so box edge cases cannot abort a
training step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .nn import Linear
from .tensor import (
    Tensor,
    concat,
    gather_rows,
    global_avg_pool,
    matmul,
    mul,
    record_op,
    relu,
    reshape,
    softmax,
    transpose,
)


@dataclass
class RoIBox:
    """Axis-aligned region in image coordinates; x2 >= x1 and y2 >= y1."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int | None = None
    score: float | None = None

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not np.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {(self.x1, self.y1, self.x2, self.y2)}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {(self.x1, self.y1, self.x2, self.y2)}")

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


class RoiStatus(IntEnum):
    OK = 0
    DEGENERATE = 1
    OUTSIDE = 2


def _box_coords(boxes):
    if isinstance(boxes, RoIBox):
        boxes = [boxes]
    arr = np.array(
        [b.as_array() if isinstance(b, RoIBox) else np.asarray(b, dtype=np.float64) for b in boxes]
    )
    return arr.reshape(-1, 4)


def _sample_points(coords, resolution, spatial_scale, sampling_ratio, h, w):
    """Per-box bilinear sample indices/weights plus a status flag.

    Samples sit at regular sub-bin centers (``sampling_ratio`` per bin side).
    Samples farther than one cell outside the feature contribute zero; other
    coordinates are clamped to the border before interpolation.
    """
    p = coords.shape[0]
    r, s = resolution, sampling_ratio
    n = (r * s) ** 2
    idx = np.zeros((p, n, 4), dtype=np.intp)
    wgt = np.zeros((p, n, 4), dtype=np.float64)
    statuses = []
    for bi in range(p):
        x1, y1, x2, y2 = coords[bi] * spatial_scale
        status = RoiStatus.OK
        if x1 > w - 1 or x2 < 0 or y1 > h - 1 or y2 < 0:
            statuses.append(RoiStatus.OUTSIDE)
            continue
        if x2 - x1 <= 0 or y2 - y1 <= 0:
            status = RoiStatus.DEGENERATE
            cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            xs = np.full(r * s, cx)
            ys = np.full(r * s, cy)
        else:
            bw, bh = (x2 - x1) / r, (y2 - y1) / r
            xs = x1 + (np.arange(r * s) + 0.5) * (bw / s)
            ys = y1 + (np.arange(r * s) + 0.5) * (bh / s)
        yy = np.repeat(ys, r * s)
        xx = np.tile(xs, r * s)
        valid = (yy > -1.0) & (yy < h) & (xx > -1.0) & (xx < w)
        yc = np.clip(yy, 0.0, h - 1.0)
        xc = np.clip(xx, 0.0, w - 1.0)
        y0 = np.floor(yc).astype(np.intp)
        x0 = np.floor(xc).astype(np.intp)
        y1i = np.minimum(y0 + 1, h - 1)
        x1i = np.minimum(x0 + 1, w - 1)
        ly = yc - y0
        lx = xc - x0
        idx[bi, :, 0] = y0 * w + x0
        idx[bi, :, 1] = y0 * w + x1i
        idx[bi, :, 2] = y1i * w + x0
        idx[bi, :, 3] = y1i * w + x1i
        wb = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx], axis=1)
        wb[~valid] = 0.0
        wgt[bi] = wb
        statuses.append(status)
    return idx, wgt, statuses


def roi_align_batch(feature, boxes, resolution, spatial_scale, sampling_ratio=2):
    """Pool several boxes at once: returns (Tensor[P, C, r, r], statuses).

    Pooling is linear in the feature, so it is materialized as one sparse
    bins-by-cells matrix; forward and backward are sparse matmuls.
    """
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    if spatial_scale <= 0:
        raise ValueError(f"spatial_scale must be > 0, got {spatial_scale}")
    if sampling_ratio < 1:
        raise ValueError(f"sampling_ratio must be >= 1, got {sampling_ratio}")
    from scipy import sparse

    c, h, w = feature.shape
    coords = _box_coords(boxes)
    p = coords.shape[0]
    r, s = resolution, sampling_ratio
    idx, wgt, statuses = _sample_points(coords, r, spatial_scale, s, h, w)
    n = (r * s) ** 2
    # sample (iy, ix) belongs to bin (iy // s, ix // s)
    iy, ix = np.divmod(np.arange(n), r * s)
    bins = (iy // s) * r + (ix // s)  # [n]
    rows = (np.arange(p)[:, None, None] * (r * r) + bins[None, :, None] + np.zeros((1, 1, 4), dtype=np.intp)).reshape(-1)
    mat = sparse.csr_matrix(
        ((wgt / (s * s)).reshape(-1).astype(feature.dtype), (rows, idx.reshape(-1))),
        shape=(p * r * r, h * w),
    )
    pooled = (mat @ feature.data.reshape(c, h * w).T).reshape(p, r, r, c)
    out = np.ascontiguousarray(pooled.transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(p * r * r, c)
        yield feature, (mat.T @ g2).T.reshape(c, h, w)

    return record_op(out, (feature,), grad_fn), statuses


def roi_align(feature, box, resolution, spatial_scale, sampling_ratio=2):
    """Pool one box; returns (Tensor[C, r, r], RoiStatus)."""
    batched, statuses = roi_align_batch(feature, [box], resolution, spatial_scale, sampling_ratio)
    c = feature.shape[0]
    return reshape(batched, (c, resolution, resolution)), statuses[0]


_INTERP_CACHE = {}


def _interp_matrix(src, dst, dtype):
    key = (src, dst, np.dtype(dtype).str)
    m = _INTERP_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((dst, src), dtype=dtype)
    if dst == 1 or src == 1:
        m[:, 0] = 1.0
    else:
        scale = (src - 1) / (dst - 1)
        for i in range(dst):
            pos = i * scale
            i0 = int(np.floor(pos))
            frac = pos - i0
            m[i, i0] += 1.0 - frac
            if frac:
                m[i, min(i0 + 1, src - 1)] += frac
    _INTERP_CACHE[key] = m
    return m


def resize_bilinear(feature_map, target):
    """Align-corners bilinear resize of square maps [..., r, r] -> [..., t, t]."""
    r = feature_map.shape[-1]
    if feature_map.shape[-2] != r:
        raise ValueError(f"expected square spatial dims, got {feature_map.shape[-2:]}")
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    if r == target:
        return feature_map
    m = _interp_matrix(r, target, feature_map.dtype)
    ry = Tensor(m)
    rxt = Tensor(m.T.copy())
    return matmul(matmul(ry, feature_map), rxt)


class BranchAttention:
    """Per-resolution scoring branch: global average pool then two fc layers."""

    def __init__(self, name, feature_dim, rng, dtype=np.float64):
        hidden = max(feature_dim // 4, 1)
        self.fc1 = Linear(f"{name}.fc1", feature_dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(f"{name}.fc2", hidden, 1, rng, dtype=dtype)

    def logit(self, pooled):
        """[P, C, r, r] -> [P, 1] logits (or [C, r, r] -> scalar)."""
        squeeze = pooled.ndim == 3
        g = global_avg_pool(pooled)
        out = self.fc2(relu(self.fc1(g)))
        return reshape(out, ()) if squeeze else out

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


def branch_weight(pooled, branch):
    """Scalar fusion logit for one pooled map."""
    return branch.logit(pooled)


@dataclass
class PooledFeature:
    """Pooled maps at each resolution plus their softmax-weighted fusion."""

    per_branch: tuple
    fused: Tensor
    weights: np.ndarray
    status: RoiStatus


class MultiScalePooler:
    """Pools proposals at several resolutions and fuses with learned weights."""

    RESOLUTIONS = (4, 8, 12)
    TARGET = 8

    def __init__(self, name, feature_dim, rng, dtype=np.float64):
        self.feature_dim = feature_dim
        self.branches = [
            BranchAttention(f"{name}.branch{r}", feature_dim, rng, dtype=dtype) for r in self.RESOLUTIONS
        ]

    def aggregate_batch(self, feature, boxes, spatial_scale=1.0, sampling_ratio=2, attention=True):
        """Fuse all boxes at once: (fused [P, C, 8, 8], weights [P, 3], statuses)."""
        pooled = []
        statuses = None
        for r in self.RESOLUTIONS:
            pb, st = roi_align_batch(feature, boxes, r, spatial_scale, sampling_ratio)
            pooled.append(pb)
            statuses = st
        p = pooled[0].shape[0]
        resized = [resize_bilinear(pb, self.TARGET) for pb in pooled]
        if not attention:
            fused = resized[0]
            for rb in resized[1:]:
                fused = fused + rb
            return fused, np.ones((p, len(self.RESOLUTIONS)), dtype=feature.dtype), statuses, pooled
        logits = concat([br.logit(pb) for br, pb in zip(self.branches, pooled)], axis=1)  # [P, 3]
        wts = softmax(logits, axis=1)
        wcols = transpose(wts, (1, 0))  # [3, P]
        fused = None
        for b, rb in enumerate(resized):
            wb = reshape(gather_rows(wcols, np.array([b])), (p, 1, 1, 1))
            term = mul(rb, wb)
            fused = term if fused is None else fused + term
        return fused, wts.data.copy(), statuses, pooled

    def aggregate(self, feature, box, spatial_scale=1.0, sampling_ratio=2, attention=True):
        """Single-proposal fusion returning a PooledFeature record."""
        fused, wts, statuses, pooled = self.aggregate_batch(
            feature, [box], spatial_scale, sampling_ratio, attention=attention
        )
        c = self.feature_dim
        per_branch = tuple(
            reshape(pb, (c, r, r)) for pb, r in zip(pooled, self.RESOLUTIONS)
        )
        return PooledFeature(
            per_branch=per_branch,
            fused=reshape(fused, (c, self.TARGET, self.TARGET)),
            weights=wts[0],
            status=statuses[0],
        )

    def parameters(self):
        return [p for br in self.branches for p in br.parameters()]
