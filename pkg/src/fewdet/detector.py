"""Toy two-stage detector hosting the attention and pooling modules.

A four-block conv backbone (total stride 8) embeds both query images and
masked support images; the support mask rides along as a fourth input
channel, with the query path feeding zeros there.  The refined query feature
goes through a single-anchor RPN, proposals are pooled by the multi-scale
pooler, and one shared head predicts classes (background last) and per-class
box deltas.  A channel-wise support-vector reweighting path is kept as the
ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import DenseCrossAttention, SupportKV
from .config import ConfigurationError
from .nn import Conv2d, Linear, he_normal
from .roi import MultiScalePooler, RoIBox, roi_align_batch
from .tensor import (
    Tensor,
    add,
    bce_with_logits,
    concat,
    cross_entropy,
    gather_rows,
    global_avg_pool,
    mul,
    relu,
    reshape,
    scale,
    smooth_l1,
    softmax,
    transpose,
)

BG_OFFSET = 0  # background class index is num_classes (last)


# ---------------------------------------------------------------------------
# box utilities (plain numpy; not differentiated)


def iou_matrix(a, b):
    """Pairwise IoU of [N, 4] and [M, 4] corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    iw = np.clip(ix2 - ix1, 0, None)
    ih = np.clip(iy2 - iy1, 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def encode_deltas(src, dst):
    """Center/size log-space offsets taking ``src`` boxes onto ``dst``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 4)
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    sx = src[:, 0] + 0.5 * sw
    sy = src[:, 1] + 0.5 * sh
    dw = dst[:, 2] - dst[:, 0]
    dh = dst[:, 3] - dst[:, 1]
    dx = dst[:, 0] + 0.5 * dw
    dy = dst[:, 1] + 0.5 * dh
    sw = np.maximum(sw, 1e-6)
    sh = np.maximum(sh, 1e-6)
    return np.stack(
        [(dx - sx) / sw, (dy - sy) / sh, np.log(np.maximum(dw, 1e-6) / sw), np.log(np.maximum(dh, 1e-6) / sh)],
        axis=1,
    )


def decode_deltas(src, deltas, clamp=4.0):
    """Apply center/size offsets to ``src`` boxes; log sizes clamped for stability."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    sx = src[:, 0] + 0.5 * sw
    sy = src[:, 1] + 0.5 * sh
    cx = deltas[:, 0] * sw + sx
    cy = deltas[:, 1] * sh + sy
    w = sw * np.exp(np.clip(deltas[:, 2], -clamp, clamp))
    h = sh * np.exp(np.clip(deltas[:, 3], -clamp, clamp))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes, width, height):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, height)
    return boxes


def nms_indices(boxes, scores, iou_threshold):
    """Greedy suppression; ties broken by lower index. Returns kept indices in score order."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for oi, i in enumerate(order):
        if suppressed[oi]:
            continue
        keep.append(int(i))
        rest = order[oi + 1 :]
        if rest.size:
            ious = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
            suppressed[oi + 1 :] |= ious > iou_threshold
    return keep


# ---------------------------------------------------------------------------
# domain records


@dataclass
class Proposal:
    box: RoIBox
    objectness: float


@dataclass
class Detection:
    box: RoIBox
    class_id: int
    score: float


@dataclass
class ClassVector:
    """Per-class channel reweighting vector of length C."""

    class_id: int
    w: Tensor


@dataclass
class RpnOutputs:
    objectness: Tensor  # [A] logits
    deltas: Tensor  # [A, 4]
    anchors: np.ndarray  # [A, 4] image-coordinate boxes


@dataclass
class DetectorConfig:
    feature_dim: int = 64
    stride: int = 8
    stage_channels: tuple = (32, 64, 64, 64)
    num_classes: int = 12
    anchor_scale: float = 1.5  # anchor side = anchor_scale * stride
    rpn_pre_nms_top_k: int = 64
    rpn_nms_iou: float = 0.7
    max_proposals: int = 32
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    head_hidden: int = 1024
    use_drd: bool = True
    use_cfa: bool = True
    cfa_attention: bool = True
    baseline_reweight: bool = False
    score_threshold: float = 0.05
    detection_nms_iou: float = 0.5
    max_detections: int = 20

    def validate(self):
        if self.feature_dim % 8:
            raise ConfigurationError(f"feature_dim {self.feature_dim} must be divisible by 8")
        if self.stage_channels[-1] != self.feature_dim:
            raise ConfigurationError(
                f"last stage channels {self.stage_channels[-1]} must equal feature_dim {self.feature_dim}"
            )
        n_down = int(round(np.log2(self.stride)))
        if 2 ** n_down != self.stride or n_down > len(self.stage_channels):
            raise ConfigurationError(f"stride {self.stride} must be a power of 2 with enough stages")
        if self.use_drd and self.baseline_reweight:
            raise ConfigurationError("use_drd and baseline_reweight are mutually exclusive")
        return self


# ---------------------------------------------------------------------------
# input assembly


def support_input(image, mask):
    """Concatenate a binary object mask as a fourth input channel."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"support image must be [3, S, S], got {img.shape}")
    if m.shape != (1,) + img.shape[1:]:
        raise ValueError(f"mask shape {m.shape} must be (1, {img.shape[1]}, {img.shape[2]})")
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError("support mask must be binary (values in {0, 1})")
    return Tensor(np.concatenate([img, m.astype(img.dtype)], axis=0))


def query_input(image):
    """Queries feed a zero fourth channel so one backbone serves both paths."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"query image must be [3, H, W], got {img.shape}")
    zeros = np.zeros((1,) + img.shape[1:], dtype=img.dtype)
    return Tensor(np.concatenate([img, zeros], axis=0))


class Backbone:
    """Stacked 3x3 conv + relu blocks; stride-2 downsampling for log2(stride) stages."""

    def __init__(self, name, cfg, rng, dtype=np.float64):
        self.stride = cfg.stride
        n_down = int(round(np.log2(cfg.stride)))
        self.convs = []
        c_in = 4
        for i, c_out in enumerate(cfg.stage_channels):
            s = 2 if i < n_down else 1
            self.convs.append(Conv2d(f"{name}.conv{i}", c_in, c_out, 3, rng, stride=s, padding=1, dtype=dtype))
            c_in = c_out

    def __call__(self, x, strict=True):
        h, w = x.shape[-2:]
        if strict and (h % self.stride or w % self.stride):
            raise ValueError(f"input size {h}x{w} not divisible by stride {self.stride}")
        out = x
        for conv in self.convs:
            out = relu(conv(out))
        return out

    def parameters(self):
        return [p for c in self.convs for p in c.parameters()]


# ---------------------------------------------------------------------------
# proposal generation


def make_anchors(fh, fw, stride, side):
    """One square anchor per feature cell, centered on the cell."""
    ys, xs = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
    cx = (xs.reshape(-1) + 0.5) * stride
    cy = (ys.reshape(-1) + 0.5) * stride
    half = side / 2.0
    return np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)


class RPN:
    """1x1 conv heads producing one objectness logit and 4 box deltas per cell."""

    def __init__(self, name, feature_dim, rng, dtype=np.float64):
        self.obj_conv = Conv2d(f"{name}.obj", feature_dim, 1, 1, rng, dtype=dtype)
        self.reg_conv = Conv2d(f"{name}.reg", feature_dim, 4, 1, rng, dtype=dtype)

    def __call__(self, feature, stride, anchor_scale):
        _, fh, fw = feature.shape
        obj = reshape(self.obj_conv(feature), (fh * fw,))
        deltas = transpose(reshape(self.reg_conv(feature), (4, fh * fw)), (1, 0))
        anchors = make_anchors(fh, fw, stride, anchor_scale * stride)
        return RpnOutputs(obj, deltas, anchors)

    def parameters(self):
        return self.obj_conv.parameters() + self.reg_conv.parameters()


def propose_arrays(rpn_out, image_width, image_height, pre_nms_top_k=64, nms_iou=0.7, max_proposals=32):
    """Decode, clip, rank and suppress anchors; returns (boxes [P,4], scores [P])."""
    scores = 1.0 / (1.0 + np.exp(-rpn_out.objectness.data.astype(np.float64)))
    boxes = clip_boxes(decode_deltas(rpn_out.anchors, rpn_out.deltas.data), image_width, image_height)
    order = np.argsort(-scores, kind="stable")[:pre_nms_top_k]
    keep = nms_indices(boxes[order], scores[order], nms_iou)[:max_proposals]
    sel = order[np.asarray(keep, dtype=np.intp)]
    return boxes[sel], scores[sel]


def rpn_propose(rpn_out, image_width, image_height, pre_nms_top_k=64, nms_iou=0.7, max_proposals=32):
    """Proposal list form of :func:`propose_arrays`."""
    boxes, scores = propose_arrays(rpn_out, image_width, image_height, pre_nms_top_k, nms_iou, max_proposals)
    return [Proposal(RoIBox(*b), float(s)) for b, s in zip(boxes, scores)]


def nms(detections, iou_threshold):
    """Greedy descending-score suppression over Detection records."""
    if not detections:
        return []
    boxes = np.array([d.box.as_array() for d in detections])
    scores = np.array([d.score for d in detections])
    return [detections[i] for i in nms_indices(boxes, scores, iou_threshold)]


# ---------------------------------------------------------------------------
# heads


class RoiHead:
    """Shared head over all classes: flatten, fc, relu, then class and box fcs."""

    def __init__(self, name, feature_dim, num_classes, rng, dtype=np.float64, hidden=1024, pooled=8):
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.pooled = pooled
        self.fc1 = Linear(f"{name}.fc1", feature_dim * pooled * pooled, hidden, rng, dtype=dtype)
        self.cls = Linear(f"{name}.cls", hidden, num_classes + 1, rng, dtype=dtype)
        self.reg = Linear(f"{name}.reg", hidden, 4 * num_classes, rng, dtype=dtype)

    def __call__(self, fused):
        squeeze = fused.ndim == 3
        p = 1 if squeeze else fused.shape[0]
        x = reshape(fused, (p, self.feature_dim * self.pooled * self.pooled))
        h = relu(self.fc1(x))
        logits = self.cls(h)
        deltas = self.reg(h)
        if squeeze:
            return reshape(logits, (self.num_classes + 1,)), reshape(deltas, (4 * self.num_classes,))
        return logits, deltas

    def parameters(self):
        return self.fc1.parameters() + self.cls.parameters() + self.reg.parameters()


def reweight_baseline(roi_feature, class_vectors):
    """Channel-wise reweighting: one class-specific copy of the RoI feature per class."""
    c = roi_feature.shape[0]
    out = []
    for cv in class_vectors:
        w = cv.w if isinstance(cv, ClassVector) else cv
        if w.shape != (c,):
            raise ValueError(f"class vector length {w.shape} must be ({c},)")
        out.append(mul(roi_feature, reshape(w, (c, 1, 1))))
    return out


# ---------------------------------------------------------------------------
# losses


def _group_mean_pair(term_fg, term_bg):
    """Average the foreground and background means; falls back to the present one."""
    if term_fg is not None and term_bg is not None:
        return add(scale(term_fg, 0.5), scale(term_bg, 0.5))
    return term_fg if term_fg is not None else term_bg


def match_rois(rois, gt_boxes, gt_labels, fg_iou, num_classes):
    """Per-RoI label (background = num_classes) and assigned gt index."""
    iou = iou_matrix(rois, gt_boxes)
    best = iou.max(axis=1)
    assigned = iou.argmax(axis=1)
    labels = np.where(best >= fg_iou, gt_labels[assigned], num_classes)
    return labels, assigned, best


def rpn_targets(anchors, gt_boxes, pos_iou, neg_iou):
    """Anchor labels: IoU thresholds plus per-gt best anchors (ties included)."""
    iou = iou_matrix(anchors, gt_boxes)
    best = iou.max(axis=1)
    assigned = iou.argmax(axis=1)
    pos = best >= pos_iou
    for g in range(gt_boxes.shape[0]):
        col = iou[:, g]
        m = col.max()
        if m > 0:
            hit = col >= m - 1e-9
            pos |= hit
            assigned[hit & (col >= best - 1e-9)] = g
    neg = (best <= neg_iou) & ~pos
    return pos, neg, assigned


def detection_loss(
    proposals,
    gt_boxes,
    class_logits,
    box_deltas,
    rpn_outputs,
    num_classes,
    rpn_pos_iou=0.7,
    rpn_neg_iou=0.3,
    roi_fg_iou=0.5,
    return_parts=False,
):
    """Faster R-CNN style loss: RPN binary cls + smooth L1, RoI cls + smooth L1.

    Classification terms average the foreground-group and background-group
    means so class balance does not depend on proposal count; the four terms
    are summed with unit weights.
    """
    gtb = np.array([g.as_array() if isinstance(g, RoIBox) else np.asarray(g, dtype=np.float64) for g in gt_boxes])
    if gtb.size == 0:
        raise ValueError("detection_loss requires at least one ground-truth box")
    gtl = np.array([g.class_id for g in gt_boxes], dtype=np.intp)
    if (gtl < 0).any() or (gtl >= num_classes).any():
        raise ValueError(f"ground-truth class ids must lie in [0, {num_classes})")
    rois = np.array([p.as_array() if isinstance(p, RoIBox) else np.asarray(p, dtype=np.float64) for p in proposals])
    parts = {}

    # region proposal side
    pos, neg, assigned = rpn_targets(rpn_outputs.anchors, gtb, rpn_pos_iou, rpn_neg_iou)
    pos_idx = np.flatnonzero(pos)
    neg_idx = np.flatnonzero(neg)
    term_pos = (
        bce_with_logits(gather_rows(rpn_outputs.objectness, pos_idx), np.ones(len(pos_idx)))
        if len(pos_idx)
        else None
    )
    term_neg = (
        bce_with_logits(gather_rows(rpn_outputs.objectness, neg_idx), np.zeros(len(neg_idx)))
        if len(neg_idx)
        else None
    )
    parts["rpn_cls"] = _group_mean_pair(term_pos, term_neg)
    if len(pos_idx):
        targets = encode_deltas(rpn_outputs.anchors[pos_idx], gtb[assigned[pos_idx]])
        pred = gather_rows(rpn_outputs.deltas, pos_idx)
        parts["rpn_reg"] = smooth_l1(pred, Tensor(targets.astype(pred.dtype)))

    # RoI side
    labels, roi_assigned, _ = match_rois(rois, gtb, gtl, roi_fg_iou, num_classes)
    fg_idx = np.flatnonzero(labels != num_classes)
    bg_idx = np.flatnonzero(labels == num_classes)
    term_fg = cross_entropy(gather_rows(class_logits, fg_idx), labels[fg_idx]) if len(fg_idx) else None
    term_bg = (
        cross_entropy(gather_rows(class_logits, bg_idx), np.full(len(bg_idx), num_classes)) if len(bg_idx) else None
    )
    roi_cls = _group_mean_pair(term_fg, term_bg)
    if roi_cls is not None:
        parts["roi_cls"] = roi_cls
    if len(fg_idx):
        targets = encode_deltas(rois[fg_idx], gtb[roi_assigned[fg_idx]])
        flat = reshape(box_deltas, (box_deltas.shape[0] * 4 * num_classes,))
        cols = labels[fg_idx] * 4
        flat_idx = (fg_idx * 4 * num_classes)[:, None] + cols[:, None] + np.arange(4)[None, :]
        pred = reshape(gather_rows(flat, flat_idx.reshape(-1)), (len(fg_idx), 4))
        parts["roi_reg"] = smooth_l1(pred, Tensor(targets.astype(pred.dtype)))

    total = None
    for t in parts.values():
        total = t if total is None else add(total, t)
    if return_parts:
        return total, {k: v.item() for k, v in parts.items()}
    return total


# ---------------------------------------------------------------------------
# the assembled detector


@dataclass
class SupportContext:
    """Precomputed per-class support state for inference."""

    class_ids: list
    support_kv: SupportKV | None = None
    class_vectors: np.ndarray | None = None


class FewShotDetector:
    """Backbone + cross-attention refinement + RPN + multi-scale RoI head."""

    def __init__(self, cfg: DetectorConfig, seed=0, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        self.backbone = Backbone("backbone", cfg, rng, dtype=dtype)
        self.drd = DenseCrossAttention("drd", cfg.feature_dim, rng, dtype=dtype)
        self.pooler = MultiScalePooler("cfa", cfg.feature_dim, rng, dtype=dtype)
        self.rpn = RPN("rpn", cfg.feature_dim, rng, dtype=dtype)
        self.roi_head = RoiHead(
            "head", cfg.feature_dim, cfg.num_classes, rng, dtype=dtype, hidden=cfg.head_hidden
        )
        self._check_unique_names()

    def _check_unique_names(self):
        names = [p.name for p in self.parameters()]
        if len(names) != len(set(names)):
            raise ConfigurationError("parameter names must be unique within a model")

    def parameters(self):
        return (
            self.backbone.parameters()
            + self.drd.parameters()
            + self.pooler.parameters()
            + self.rpn.parameters()
            + self.roi_head.parameters()
        )

    def state_dict(self):
        return {p.name: p.tensor.data.copy() for p in self.parameters()}

    def load_state_dict(self, arrays):
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name!r}")
            a = arrays[p.name]
            if a.shape != p.tensor.data.shape:
                raise ValueError(f"{p.name}: checkpoint shape {a.shape} != model shape {p.tensor.data.shape}")
            p.tensor.data = a.astype(self.dtype, copy=True)
            p.momentum_buffer = None
            p.tensor.grad = None

    def reinit_classifier(self, seed):
        """Fresh random classification fc; done when fine-tuning starts."""
        rng = np.random.default_rng(seed)
        w = self.roi_head.cls.weight
        w.tensor.data = he_normal(rng, w.tensor.data.shape, w.tensor.data.shape[1], self.dtype)
        w.momentum_buffer = None
        b = self.roi_head.cls.bias
        b.tensor.data = np.zeros_like(b.tensor.data)
        b.momentum_buffer = None

    # -- feature paths ------------------------------------------------------

    def _support_batch(self, supports):
        arrs = []
        for s in supports:
            arrs.append(support_input(Tensor(s.image, dtype=self.dtype), Tensor(s.mask, dtype=self.dtype)).data)
        return Tensor(np.stack(arrs))

    def _refined_query_feature(self, image, support_feats=None, support_kv=None):
        f_q = self.backbone(query_input(Tensor(image, dtype=self.dtype)))
        if not self.cfg.use_drd:
            return f_q, f_q
        src = support_kv if support_kv is not None else support_feats
        return self.drd.refine(f_q, src), f_q

    def _pool(self, feature, rois):
        scale_ = 1.0 / self.cfg.stride
        if self.cfg.use_cfa:
            fused, wts, statuses, _ = self.pooler.aggregate_batch(
                feature, rois, spatial_scale=scale_, attention=self.cfg.cfa_attention
            )
            return fused, wts, statuses
        fused, statuses = roi_align_batch(feature, rois, 8, spatial_scale=scale_)
        return fused, np.zeros((len(rois), 0)), statuses

    # -- training -----------------------------------------------------------

    def forward_train(self, episode, return_parts=False, proposal_boxes=None):
        """One episodic forward pass producing the scalar training loss.

        ``proposal_boxes`` pins the RoI set (used by finite-difference
        validation, where the discrete proposal selection must stay fixed).
        """
        gt = episode.gt_boxes
        if not gt:
            raise ValueError("episode has no ground-truth boxes")
        class_ids = [s.class_id for s in episode.supports]
        f_s = self.backbone(self._support_batch(episode.supports))
        feature, _ = self._refined_query_feature(episode.query_image, support_feats=f_s)
        h, w = episode.query_image.shape[-2:]
        rpn_out = self.rpn(feature, self.cfg.stride, self.cfg.anchor_scale)
        if proposal_boxes is None:
            prop_boxes, _ = propose_arrays(
                rpn_out, w, h, self.cfg.rpn_pre_nms_top_k, self.cfg.rpn_nms_iou, self.cfg.max_proposals
            )
        else:
            prop_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
        gtb = np.array([g.as_array() for g in gt])
        rois = np.concatenate([prop_boxes, gtb], axis=0)  # gt appended for stable RoI training
        fused, branch_weights, _ = self._pool(feature, rois)
        if self.cfg.baseline_reweight:
            total, parts = self._baseline_loss(fused, rois, gt, class_ids, f_s, rpn_out)
        else:
            logits, deltas = self.roi_head(fused)
            total, parts = detection_loss(
                rois,
                gt,
                logits,
                deltas,
                rpn_out,
                self.cfg.num_classes,
                self.cfg.rpn_pos_iou,
                self.cfg.rpn_neg_iou,
                self.cfg.roi_fg_iou,
                return_parts=True,
            )
        if return_parts:
            parts["branch_weights"] = branch_weights
            parts["proposal_boxes"] = prop_boxes
            return total, parts
        return total

    def _baseline_loss(self, fused, rois, gt, class_ids, f_s, rpn_out):
        """Per-class prediction after channel reweighting, as in the vector baseline."""
        cfg = self.cfg
        k = cfg.num_classes
        gtb = np.array([g.as_array() for g in gt])
        gtl = np.array([g.class_id for g in gt], dtype=np.intp)
        n = len(class_ids)
        r = fused.shape[0]
        vectors = global_avg_pool(f_s)  # [N, C]
        z_all = mul(
            reshape(fused, (r, 1, cfg.feature_dim, 8, 8)),
            reshape(vectors, (1, n, cfg.feature_dim, 1, 1)),
        )
        logits, deltas = self.roi_head(reshape(z_all, (r * n, cfg.feature_dim, 8, 8)))
        labels, assigned, _ = match_rois(rois, gtb, gtl, cfg.roi_fg_iou, k)
        branch_of = {cid: i for i, cid in enumerate(class_ids)}
        flat_labels = np.full(r * n, k, dtype=np.intp)
        fg_rows = []
        for ri in range(r):
            if labels[ri] != k and labels[ri] in branch_of:
                row = ri * n + branch_of[labels[ri]]
                flat_labels[row] = labels[ri]
                fg_rows.append(row)
        fg_rows = np.asarray(fg_rows, dtype=np.intp)
        bg_rows = np.setdiff1d(np.arange(r * n), fg_rows)
        parts = {}
        pos, neg, a_assigned = rpn_targets(rpn_out.anchors, gtb, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        pos_idx, neg_idx = np.flatnonzero(pos), np.flatnonzero(neg)
        term_pos = (
            bce_with_logits(gather_rows(rpn_out.objectness, pos_idx), np.ones(len(pos_idx)))
            if len(pos_idx)
            else None
        )
        term_neg = (
            bce_with_logits(gather_rows(rpn_out.objectness, neg_idx), np.zeros(len(neg_idx)))
            if len(neg_idx)
            else None
        )
        parts["rpn_cls"] = _group_mean_pair(term_pos, term_neg)
        if len(pos_idx):
            targets = encode_deltas(rpn_out.anchors[pos_idx], gtb[a_assigned[pos_idx]])
            pred = gather_rows(rpn_out.deltas, pos_idx)
            parts["rpn_reg"] = smooth_l1(pred, Tensor(targets.astype(pred.dtype)))
        term_fg = cross_entropy(gather_rows(logits, fg_rows), flat_labels[fg_rows]) if len(fg_rows) else None
        term_bg = cross_entropy(gather_rows(logits, bg_rows), flat_labels[bg_rows]) if len(bg_rows) else None
        parts["roi_cls"] = _group_mean_pair(term_fg, term_bg)
        if len(fg_rows):
            fg_rois = np.array([ri // n for ri in fg_rows])
            targets = encode_deltas(rois[fg_rois], gtb[assigned[fg_rois]])
            flat = reshape(deltas, (r * n * 4 * k,))
            cls_of_row = flat_labels[fg_rows]
            flat_idx = (fg_rows * 4 * k)[:, None] + (cls_of_row * 4)[:, None] + np.arange(4)[None, :]
            pred = reshape(gather_rows(flat, flat_idx.reshape(-1)), (len(fg_rows), 4))
            parts["roi_reg"] = smooth_l1(pred, Tensor(targets.astype(pred.dtype)))
        total = None
        for t in parts.values():
            total = t if total is None else add(total, t)
        return total, {key: v.item() for key, v in parts.items()}

    # -- inference ----------------------------------------------------------

    def build_support_context(self, per_class):
        """Average per-class support features over the provided shot instances.

        ``per_class`` is a list of (class_id, [(image, mask), ...]); features
        are averaged over the k shots before encoding.
        """
        feats = []
        ids = []
        for cid, pairs in per_class:
            batch = np.stack(
                [
                    support_input(Tensor(img, dtype=self.dtype), Tensor(m, dtype=self.dtype)).data
                    for img, m in pairs
                ]
            )
            f = self.backbone(Tensor(batch)).data.mean(axis=0)
            feats.append(f)
            ids.append(cid)
        stacked = np.stack(feats)
        ctx = SupportContext(class_ids=ids)
        if self.cfg.use_drd:
            ctx.support_kv = self.drd.encode_supports(Tensor(stacked))
        if self.cfg.baseline_reweight:
            ctx.class_vectors = stacked.mean(axis=(2, 3))
        return ctx

    def detect(self, image, ctx):
        """Run inference on one query image given a support context."""
        feature, _ = self._refined_query_feature(image, support_kv=ctx.support_kv if ctx else None)
        h, w = image.shape[-2:]
        rpn_out = self.rpn(feature, self.cfg.stride, self.cfg.anchor_scale)
        prop_boxes, _ = propose_arrays(
            rpn_out, w, h, self.cfg.rpn_pre_nms_top_k, self.cfg.rpn_nms_iou, self.cfg.max_proposals
        )
        if prop_boxes.shape[0] == 0:
            return []
        fused, _, _ = self._pool(feature, prop_boxes)
        k = self.cfg.num_classes
        if self.cfg.baseline_reweight:
            scores, deltas = self._baseline_scores(fused, ctx)
        else:
            logits, deltas_t = self.roi_head(fused)
            probs = _softmax_np(logits.data)
            scores = probs[:, :k]
            deltas = deltas_t.data
        detections = []
        for c in range(k):
            if self.cfg.baseline_reweight and not np.isfinite(scores[:, c]).any():
                continue
            cand = np.flatnonzero(scores[:, c] >= self.cfg.score_threshold)
            if cand.size == 0:
                continue
            boxes_c = clip_boxes(decode_deltas(prop_boxes[cand], deltas[cand, 4 * c : 4 * c + 4]), w, h)
            dets = [
                Detection(RoIBox(*b), c, float(s))
                for b, s in zip(boxes_c, scores[cand, c])
                if b[2] > b[0] and b[3] > b[1]
            ]
            detections.extend(nms(dets, self.cfg.detection_nms_iou))
        detections.sort(key=lambda d: -d.score)
        return detections[: self.cfg.max_detections]

    def _baseline_scores(self, fused, ctx):
        cfg = self.cfg
        k = cfg.num_classes
        r = fused.shape[0]
        n = len(ctx.class_ids)
        vec = Tensor(ctx.class_vectors.astype(self.dtype))
        z_all = mul(
            reshape(fused, (r, 1, cfg.feature_dim, 8, 8)), reshape(vec, (1, n, cfg.feature_dim, 1, 1))
        )
        logits, deltas = self.roi_head(reshape(z_all, (r * n, cfg.feature_dim, 8, 8)))
        probs = _softmax_np(logits.data).reshape(r, n, k + 1)
        d = deltas.data.reshape(r, n, 4 * k)
        scores = np.full((r, k), -np.inf)
        out_deltas = np.zeros((r, 4 * k))
        for i, cid in enumerate(ctx.class_ids):
            scores[:, cid] = probs[:, i, cid]
            out_deltas[:, 4 * cid : 4 * cid + 4] = d[:, i, 4 * cid : 4 * cid + 4]
        return scores, out_deltas


def _softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
