"""Detection evaluation: per-class AP at IoU 0.5 and JSON-lines records."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .detector import iou_matrix


@dataclass
class RunMetrics:
    """Per-run evaluation record aggregated by the multi-run harness."""

    run_index: int
    k: int
    split_id: int
    seed: int
    ap_per_class: dict  # class_id -> AP in [0, 1], or None when undefined
    mean_novel_ap50: float
    mean_base_ap50: float
    wall_time: float
    warnings: list = field(default_factory=list)

    def to_record(self, config=None):
        rec = {
            "kind": "run",
            "run_index": self.run_index,
            "k": self.k,
            "split_id": self.split_id,
            "seed": self.seed,
            "ap_per_class": {str(c): v for c, v in self.ap_per_class.items()},
            "mean_novel_ap50": self.mean_novel_ap50,
            "mean_base_ap50": self.mean_base_ap50,
            "wall_time": self.wall_time,
            "warnings": self.warnings,
        }
        if config is not None:
            rec["config"] = config
        return rec

    @classmethod
    def from_record(cls, rec):
        return cls(
            run_index=rec["run_index"],
            k=rec["k"],
            split_id=rec["split_id"],
            seed=rec["seed"],
            ap_per_class={int(c): v for c, v in rec["ap_per_class"].items()},
            mean_novel_ap50=rec["mean_novel_ap50"],
            mean_base_ap50=rec["mean_base_ap50"],
            wall_time=rec["wall_time"],
            warnings=list(rec.get("warnings", [])),
        )


def average_precision(matches, num_gt):
    """All-point interpolated AP from per-detection hit flags (score-ordered).

    ``matches`` is the true/false positive flag per detection, already sorted
    by descending score; ``num_gt`` the number of ground-truth objects.
    """
    if num_gt == 0:
        return None
    if len(matches) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(matches, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(matches, dtype=np.float64))
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, integrated over every recall step
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def match_detections(dets, gts, iou_threshold=0.5):
    """Greedy matching by descending score; one detection per ground truth.

    ``dets``: (image_id, score, box[4]) tuples for one class.
    ``gts``: (image_id, box[4]) tuples for the same class.
    Returns hit flags aligned with the score-sorted detections.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][1], dets[i][0], i))
    gt_by_image = {}
    for gi, (img, box) in enumerate(gts):
        gt_by_image.setdefault(img, []).append((gi, np.asarray(box, dtype=np.float64)))
    used = np.zeros(len(gts), dtype=bool)
    flags = []
    for i in order:
        img, _, box = dets[i]
        best_iou, best_gi = 0.0, -1
        for gi, gbox in gt_by_image.get(img, ()):
            if used[gi]:
                continue
            iou = iou_matrix(np.asarray(box)[None], gbox[None])[0, 0]
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0 and best_iou >= iou_threshold:
            used[best_gi] = True
            flags.append(1.0)
        else:
            flags.append(0.0)
    return flags


def evaluate_detections(per_image_detections, per_image_gts, class_ids, iou_threshold=0.5):
    """Per-class AP50 over a whole test stream.

    Classes with no ground truth anywhere get AP None (undefined) and a
    warning entry instead of polluting the means.
    """
    aps = {}
    warnings = []
    for c in class_ids:
        dets = []
        gts = []
        for img_id, (im_dets, im_gts) in enumerate(zip(per_image_detections, per_image_gts)):
            for d in im_dets:
                if d.class_id == c:
                    dets.append((img_id, d.score, d.box.as_array()))
            for g in im_gts:
                if g.class_id == c:
                    gts.append((img_id, g.as_array()))
        if not gts:
            aps[c] = None
            warnings.append(f"class {c} absent from test stream; AP undefined")
            continue
        flags = match_detections(dets, gts, iou_threshold)
        aps[c] = average_precision(flags, len(gts))
    return aps, warnings


def evaluate(detect_fn, stream, split, iou_threshold=0.5, run_index=0, k=0, seed=0):
    """Run a detector over a test stream and score it; returns RunMetrics."""
    t0 = time.perf_counter()
    per_dets, per_gts = [], []
    for image, gt_boxes in stream:
        per_dets.append(detect_fn(image))
        per_gts.append(gt_boxes)
    if len(per_dets) == 0:
        raise ValueError("evaluation stream is empty")
    class_ids = sorted(split.base_classes + split.novel_classes)
    aps, warnings = evaluate_detections(per_dets, per_gts, class_ids, iou_threshold)

    def _mean(ids):
        vals = [aps[c] for c in ids if aps.get(c) is not None]
        return float(np.mean(vals)) if vals else 0.0

    return RunMetrics(
        run_index=run_index,
        k=k,
        split_id=split.split_id,
        seed=seed,
        ap_per_class=aps,
        mean_novel_ap50=_mean(split.novel_classes),
        mean_base_ap50=_mean(split.base_classes),
        wall_time=time.perf_counter() - t0,
        warnings=warnings,
    )


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def aggregate_records(metrics, config=None):
    """Mean/std aggregate over per-run metrics."""
    novel = [m.mean_novel_ap50 for m in metrics]
    base = [m.mean_base_ap50 for m in metrics]
    rec = {
        "kind": "aggregate",
        "num_runs": len(metrics),
        "mean_novel_ap50": float(np.mean(novel)),
        "std_novel_ap50": float(np.std(novel)),
        "mean_base_ap50": float(np.mean(base)),
        "std_base_ap50": float(np.std(base)),
    }
    if config is not None:
        rec["config"] = config
    return rec
