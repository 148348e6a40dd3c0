"""Brute-force reference implementations.

These deliberately use scalar loops and a different structure from the
vectorized code paths they validate; agreement within tight tolerances is
the correctness argument for the fast implementations.  The ``oracle`` CLI
command runs the whole battery.
"""

from __future__ import annotations

import numpy as np


def matmul_loop(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def similarity_loop(k_q, k_s, phi, phi_prime):
    """Per-pixel dot products of transformed keys, one pair at a time."""
    c8, hq, wq = k_q.shape
    _, hs, ws = k_s.shape
    q = k_q.reshape(c8, hq * wq)
    s = k_s.reshape(c8, hs * ws)
    out = np.zeros((hq * wq, hs * ws))
    for i in range(hq * wq):
        qi = phi @ q[:, i]
        for j in range(hs * ws):
            out[i, j] = float(qi @ (phi_prime @ s[:, j]))
    return out


def distill_loop(k_q, k_s, v_q, v_s, phi, phi_prime):
    """Reference retrieval: per class, per query pixel, explicit softmax sum."""
    c2, hq, wq = v_q.shape
    n = k_s.shape[0]
    hs, ws = k_s.shape[-2:]
    retrieved = np.zeros((c2, hq * wq))
    vq_flat = v_q.reshape(c2, hq * wq)
    for cls in range(n):
        sim = similarity_loop(k_q, k_s[cls], phi, phi_prime)
        vs_flat = v_s[cls].reshape(c2, hs * ws)
        for i in range(hq * wq):
            row = sim[i] - sim[i].max()
            w = np.exp(row)
            w = w / w.sum()
            for j in range(hs * ws):
                retrieved[:, i] += w[j] * vs_flat[:, j]
    return np.concatenate([vq_flat, retrieved], axis=0).reshape(c2 * 2, hq, wq)


def bilinear_sample(feature, y, x):
    """One interpolated read with border clamping; far-outside samples read 0."""
    c, h, w = feature.shape
    if y < -1.0 or y > h or x < -1.0 or x > w:
        return np.zeros(c, dtype=feature.dtype)
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0, x0 = int(np.floor(y)), int(np.floor(x))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    return (
        feature[:, y0, x0] * (1 - ly) * (1 - lx)
        + feature[:, y0, x1] * (1 - ly) * lx
        + feature[:, y1, x0] * ly * (1 - lx)
        + feature[:, y1, x1] * ly * lx
    )


def roi_align_loop(feature, box, resolution, spatial_scale, sampling_ratio=2):
    """Direct per-bin, per-sample pooling; mirrors the degenerate-box rule."""
    c = feature.shape[0]
    x1, y1, x2, y2 = (v * spatial_scale for v in (box.x1, box.y1, box.x2, box.y2))
    h, w = feature.shape[1:]
    if x1 > w - 1 or x2 < 0 or y1 > h - 1 or y2 < 0:
        return np.zeros((c, resolution, resolution), dtype=feature.dtype)
    out = np.zeros((c, resolution, resolution), dtype=np.float64)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        val = bilinear_sample(feature, (y1 + y2) / 2.0, (x1 + x2) / 2.0)
        out[:] = val[:, None, None]
        return out
    bw = (x2 - x1) / resolution
    bh = (y2 - y1) / resolution
    s = sampling_ratio
    for by in range(resolution):
        for bx in range(resolution):
            acc = np.zeros(c, dtype=np.float64)
            for sy in range(s):
                for sx in range(s):
                    yy = y1 + (by + (sy + 0.5) / s) * bh
                    xx = x1 + (bx + (sx + 0.5) / s) * bw
                    acc += bilinear_sample(feature, yy, xx)
            out[:, by, bx] = acc / (s * s)
    return out


def _iou_scalar(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def nms_loop(boxes, scores, iou_threshold):
    """Quadratic greedy suppression; ties broken by lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(_iou_scalar(boxes[i], boxes[j]) <= iou_threshold for j in kept):
            kept.append(i)
    return kept


def rpn_propose_loop(objectness, deltas, anchors, width, height, top_k, nms_iou, max_proposals):
    """Exhaustive anchor ranking, per-anchor decoding, then greedy NMS."""
    scores = [1.0 / (1.0 + np.exp(-float(z))) for z in objectness]
    boxes = []
    for a, d in zip(anchors, deltas):
        aw, ah = a[2] - a[0], a[3] - a[1]
        acx, acy = a[0] + aw / 2.0, a[1] + ah / 2.0
        cx = float(d[0]) * aw + acx
        cy = float(d[1]) * ah + acy
        w = aw * np.exp(min(max(float(d[2]), -4.0), 4.0))
        h = ah * np.exp(min(max(float(d[3]), -4.0), 4.0))
        box = [cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2]
        box[0] = min(max(box[0], 0.0), width)
        box[2] = min(max(box[2], 0.0), width)
        box[1] = min(max(box[1], 0.0), height)
        box[3] = min(max(box[3], 0.0), height)
        boxes.append(box)
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:top_k]
    kept_local = nms_loop([boxes[i] for i in ranked], [scores[i] for i in ranked], nms_iou)
    chosen = [ranked[i] for i in kept_local][:max_proposals]
    return np.array([boxes[i] for i in chosen]), np.array([scores[i] for i in chosen])


def average_precision_reference(flags, num_gt):
    """AP as mean over recall steps of the best precision at recall >= step."""
    if num_gt == 0:
        return None
    flags = [float(f) for f in flags]
    if not flags:
        return 0.0
    prec = []
    rec = []
    tp = 0
    for i, f in enumerate(flags):
        tp += f
        prec.append(tp / (i + 1))
        rec.append(tp / num_gt)
    ap = 0.0
    total_tp = int(round(tp))
    for step in range(1, total_tp + 1):
        r = step / num_gt
        ap += max(p for p, rr in zip(prec, rec) if rr >= r - 1e-12) / num_gt
    return ap


def run_oracle_suite(seed=0):
    """Compare every fast path against its reference; returns result rows."""
    from .attention import distill, KeyValueMaps, SupportKV, similarity
    from .detector import RpnOutputs, make_anchors, nms_indices, propose_arrays
    from .metrics import average_precision
    from .roi import RoIBox, roi_align
    from .tensor import Tensor
    from . import tensor as T

    rng = np.random.default_rng(seed)
    rows = []

    worst = 0.0
    for _ in range(10):
        m, k, n = rng.integers(2, 7, size=3)
        a = rng.standard_normal((m, k))
        b = rng.standard_normal((k, n))
        worst = max(worst, float(np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_loop(a, b)).max()))
    rows.append(("matmul vs triple loop", worst, 1e-12))

    worst = 0.0
    for _ in range(50):
        c = int(rng.choice([8, 16, 32]))
        hq, wq, hs, ws = rng.integers(2, 9, size=4)
        n = int(rng.integers(1, 5))
        kq = rng.standard_normal((c // 8, hq, wq))
        ks = rng.standard_normal((n, c // 8, hs, ws))
        vq = rng.standard_normal((c // 2, hq, wq))
        vs = rng.standard_normal((n, c // 2, hs, ws))
        phi = rng.standard_normal((c // 8, c // 8))
        phip = rng.standard_normal((c // 8, c // 8))
        fast = distill(
            KeyValueMaps(Tensor(kq), Tensor(vq)),
            SupportKV(Tensor(ks), Tensor(vs)),
            Tensor(phi),
            Tensor(phip),
        ).data
        slow = distill_loop(kq, ks, vq, vs, phi, phip)
        worst = max(worst, float(np.abs(fast - slow).max()))
    rows.append(("attention distill vs per-pixel loop (50 cases)", worst, 1e-10))

    worst = 0.0
    for _ in range(200):
        c = int(rng.integers(1, 5))
        h, w = rng.integers(6, 14, size=2)
        feat = rng.standard_normal((c, h, w))
        res = int(rng.choice([1, 2, 4, 7]))
        scale = float(rng.choice([0.5, 1.0, 0.25]))
        x1, y1 = rng.uniform(-3, w / scale - 1, size=2)
        bw, bh = rng.uniform(0.5, w / scale, size=2)
        box = RoIBox(x1, y1, x1 + bw, y1 + bh)
        fast, _ = roi_align(Tensor(feat), box, res, scale)
        slow = roi_align_loop(feat, box, res, scale)
        worst = max(worst, float(np.abs(fast.data - slow).max()))
    rows.append(("roi_align vs bilinear loop (200 cases)", worst, 1e-12))

    agree = True
    for _ in range(30):
        nb = int(rng.integers(1, 21))
        boxes = np.sort(rng.uniform(0, 50, size=(nb, 2, 2)), axis=1).reshape(nb, 4)[:, [0, 2, 1, 3]]
        scores = rng.random(nb)
        fast = nms_indices(boxes, scores, 0.5)
        slow = nms_loop(boxes.tolist(), scores.tolist(), 0.5)
        agree &= fast == slow
    rows.append(("nms vs quadratic loop (30 cases)", 0.0 if agree else 1.0, 0.5))

    agree = True
    for _ in range(10):
        fh = fw = 6
        anchors = make_anchors(fh, fw, 8, 12.0)
        obj = Tensor(rng.standard_normal(fh * fw))
        deltas = Tensor(0.3 * rng.standard_normal((fh * fw, 4)))
        out = RpnOutputs(obj, deltas, anchors)
        fb, fs = propose_arrays(out, 48, 48, 16, 0.7, 8)
        sb, ss = rpn_propose_loop(obj.data, deltas.data, anchors, 48, 48, 16, 0.7, 8)
        agree &= fb.shape == sb.shape and np.allclose(fb, sb, atol=1e-9) and np.allclose(fs, ss, atol=1e-12)
    rows.append(("rpn proposals vs exhaustive loop (10 cases)", 0.0 if agree else 1.0, 0.5))

    worst = 0.0
    for _ in range(50):
        ng = int(rng.integers(1, 8))
        nd = int(rng.integers(0, 15))
        flags = (rng.random(nd) < 0.5).astype(float)
        while flags.sum() > ng:  # at most one detection per ground truth
            flags[np.flatnonzero(flags)[-1]] = 0.0
        fast = average_precision(flags.tolist(), ng)
        slow = average_precision_reference(flags.tolist(), ng)
        worst = max(worst, abs(fast - slow))
    rows.append(("average precision vs reference scorer (50 cases)", worst, 1e-12))
    return rows


def format_oracle_report(rows):
    lines = ["oracle comparison                                    max abs err   tolerance   status"]
    for name, err, tol in rows:
        status = "pass" if err <= tol else "FAIL"
        lines.append(f"{name:<52}{err:>12.3e}{tol:>12.1e}   {status}")
    npass = sum(1 for _, err, tol in rows if err <= tol)
    lines.append(f"{npass}/{len(rows)} oracle checks passed")
    return lines, npass == len(rows)
