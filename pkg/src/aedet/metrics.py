"""IoU, NMS, greedy-matched average precision and dataset-level evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import size_bucket
from .errors import EvalError, MetricError

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
SIZE_BUCKETS = ("small", "medium", "large")
DEFAULT_CONF_THRESHOLD = 0.05
DEFAULT_NMS_THRESHOLD = 0.5


def _corners(box) -> tuple[float, float, float, float]:
    return tuple(box.corners()) if hasattr(box, "corners") else tuple(box)


def iou(a, b) -> float:
    """Intersection over union of two boxes.

    Boxes are either objects with ``corners()`` or ``(x0, y0, x1, y1)`` tuples.
    """
    ax0, ay0, ax1, ay1 = _corners(a)
    bx0, by0, bx1, by1 = _corners(b)
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    if not (area_a > 0 and area_b > 0):
        raise MetricError(f"iou needs positive-area boxes, got {a} and {b}")
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if inter == area_a == area_b:
        return 1.0
    return inter / (area_a + area_b - inter)


def nms(detections: Sequence, iou_threshold: float = DEFAULT_NMS_THRESHOLD) -> list:
    """Greedy per-class suppression; returns kept detections sorted by score."""
    if not 0 < iou_threshold <= 1:
        raise MetricError(f"nms threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list = []
    for i in order:
        d = detections[i]
        if all(k.class_id != d.class_id or iou(k, d) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def _per_image(items) -> list[list]:
    """Accept either one flat list (single image) or a list of per-image lists."""
    items = list(items)
    if items and not isinstance(items[0], (list, tuple)):
        return [items]
    return [list(x) for x in items]


def match_detections(detections: Sequence, ground_truth: Sequence, iou_threshold: float) -> list[bool]:
    """TP flags for one image, in score order (ties keep input order).

    A detection is a TP when the unmatched same-class GT it overlaps most has
    IoU >= threshold; that GT is then consumed.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    used = [False] * len(ground_truth)
    flags = []
    for i in order:
        d = detections[i]
        best, best_iou = -1, -1.0
        for j, g in enumerate(ground_truth):
            if used[j] or g.class_id != d.class_id:
                continue
            v = iou(d, g)
            if v > best_iou:
                best, best_iou = j, v
        hit = best >= 0 and best_iou >= iou_threshold
        if hit:
            used[best] = True
        flags.append(hit)
    return flags


def interpolated_ap(tp: np.ndarray, n_gt: int, interpolation: str = "coco") -> float:
    """Area under the precision envelope for TP flags already in score order."""
    if n_gt == 0:
        return 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == "coco":
        points = np.arange(101) / 100.0
    elif interpolation == "voc11":
        points = np.arange(11) / 10.0
    else:
        raise MetricError(f"unknown interpolation {interpolation!r}")
    idx = np.searchsorted(recall, points, side="left")
    vals = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    # exactly rounded sum, so the result does not depend on summation order
    return math.fsum(vals.tolist()) / len(vals)


def class_scores(detections, ground_truth, iou_threshold: float) -> dict[int, tuple[np.ndarray, int]]:
    """Per class: TP flags in global score order and the GT count."""
    dets_img = _per_image(detections)
    gts_img = _per_image(ground_truth)
    if len(dets_img) != len(gts_img):
        if not dets_img:
            dets_img = [[] for _ in gts_img]
        elif not gts_img:
            gts_img = [[] for _ in dets_img]
        else:
            raise MetricError(f"{len(dets_img)} detection lists vs {len(gts_img)} ground-truth lists")
    classes = sorted({d.class_id for img in dets_img for d in img} | {g.class_id for img in gts_img for g in img})
    out = {}
    for c in classes:
        scored = []
        n_gt = 0
        for img_idx, (dets, gts) in enumerate(zip(dets_img, gts_img)):
            cd = [d for d in dets if d.class_id == c]
            cg = [g for g in gts if g.class_id == c]
            n_gt += len(cg)
            order = sorted(range(len(cd)), key=lambda i: -cd[i].score)
            flags = match_detections(cd, cg, iou_threshold)
            scored.extend((-cd[i].score, img_idx, rank, f) for rank, (i, f) in enumerate(zip(order, flags)))
        scored.sort(key=lambda s: s[:3])
        out[c] = (np.array([s[3] for s in scored], dtype=float), n_gt)
    return out


def average_precision(detections, ground_truth, iou_threshold: float = 0.5, interpolation: str = "coco") -> float:
    """Class-mean AP with greedy matching.

    ``detections``/``ground_truth`` are flat lists for one image or lists of
    per-image lists. Classes without GT and without detections are left out of the
    mean; classes without GT but with detections score 0. With nothing at all to
    evaluate the result is 1.
    """
    aps = [
        interpolated_ap(tp, n_gt, interpolation) for tp, n_gt in class_scores(detections, ground_truth, iou_threshold).values()
    ]
    return math.fsum(aps) / len(aps) if aps else 1.0


def pr_curve(tp: np.ndarray, n_gt: int) -> list[tuple[float, float]]:
    if tp.size == 0 or n_gt == 0:
        return []
    ctp = np.cumsum(tp)
    return [(float(r), float(p)) for r, p in zip(ctp / n_gt, ctp / np.arange(1, tp.size + 1))]


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    size_ap50: dict
    thresholds: list
    ap_curve: list
    pr_curves: dict = field(default_factory=dict)
    num_images: int = 0
    num_objects: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pr_curves"] = {str(k): [list(p) for p in v] for k, v in self.pr_curves.items()}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def save_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "ap"])
            for t, a in zip(self.thresholds, self.ap_curve):
                w.writerow([f"{t:.2f}", repr(a)])

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["pr_curves"] = {int(k): [tuple(p) for p in v] for k, v in d.get("pr_curves", {}).items()}
        return cls(**d)


def report_from_detections(detections: Sequence[Sequence], ground_truth: Sequence[Sequence], interpolation: str = "coco") -> EvalReport:
    """Build a full report from per-image detection and GT lists."""
    if len(ground_truth) == 0:
        raise EvalError("cannot evaluate an empty dataset")
    detections = [list(d) for d in detections]
    ground_truth = [list(g) for g in ground_truth]
    curve = [average_precision(detections, ground_truth, t, interpolation) for t in IOU_THRESHOLDS]
    size_ap = {}
    for bucket in SIZE_BUCKETS:
        gts = [[g for g in img if size_bucket(g.area) == bucket] for img in ground_truth]
        dets = [[d for d in img if size_bucket(d.area) == bucket] for img in detections]
        if any(gts):
            size_ap[bucket] = average_precision(dets, gts, 0.5, interpolation)
        else:
            size_ap[bucket] = None
    pr = {c: pr_curve(tp, n) for c, (tp, n) in class_scores(detections, ground_truth, 0.5).items()}
    return EvalReport(
        ap=float(np.mean(curve)),
        ap50=curve[0],
        ap75=curve[IOU_THRESHOLDS.index(0.75)],
        size_ap50=size_ap,
        thresholds=list(IOU_THRESHOLDS),
        ap_curve=curve,
        pr_curves=pr,
        num_images=len(ground_truth),
        num_objects=sum(len(g) for g in ground_truth),
    )


def predict(model, images: np.ndarray, conf_threshold: float = DEFAULT_CONF_THRESHOLD, nms_threshold: float = DEFAULT_NMS_THRESHOLD, batch_size: int = 64) -> list[list]:
    """Post-NMS detections per image with the excitation factor held at 0."""
    from .model import decode_predictions

    out: list[list] = []
    for start in range(0, len(images), batch_size):
        raw = model.forward(images[start : start + batch_size], None, 0.0)
        for dets in decode_predictions(raw, model.config, conf_threshold):
            out.append(nms(dets, nms_threshold))
    return out


def evaluate(
    model,
    dataset,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    interpolation: str = "coco",
) -> EvalReport:
    if len(dataset) == 0:
        raise EvalError("cannot evaluate an empty dataset")
    dets = predict(model, dataset.images, conf_threshold, nms_threshold)
    return report_from_detections(dets, dataset.labels, interpolation)


def ap_is_monotone(report: EvalReport) -> bool:
    return all(a >= b for a, b in zip(report.ap_curve, report.ap_curve[1:]))
