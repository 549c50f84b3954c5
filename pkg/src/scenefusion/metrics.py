"""Detection and classification metrics: IoU, greedy matching, COCO-style
AP / mAP, KITTI-style bucketed AP, and Top-1 accuracy.

Conventions:
  * detections are matched greedily in descending score order (stable, so
    equal scores keep input order); each detection takes the unmatched GT
    with the highest IoU, and is a TP if that IoU reaches the threshold;
  * AP uses the monotone precision envelope, sampled at 101 recall points
    for mAP metrics and at 40 points (1/40 ... 1) for KITTI-style AP;
  * classes without ground truth are left out of class means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou_matrix

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
KITTI_MIN_HEIGHT = {"easy": 40.0, "moderate": 25.0, "hard": 15.0}
KITTI_REFERENCE_SIZE = 128


@dataclass
class ImageDetections:
    boxes: np.ndarray  # [N, 4]
    scores: np.ndarray  # [N]
    classes: np.ndarray  # [N]


@dataclass
class ImageTruth:
    boxes: np.ndarray  # [M, 4]
    classes: np.ndarray  # [M]


@dataclass
class MatchResult:
    tp: np.ndarray  # bool per detection, input order
    matched_gt: np.ndarray  # GT index per detection, -1 if none
    ignored: np.ndarray  # bool per detection; neither TP nor FP
    n_gt: int

    @property
    def unmatched_gt(self) -> int:
        return self.n_gt - int(self.tp.sum())


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def match(boxes: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray, iou_thr: float,
          gt_ignore: Optional[np.ndarray] = None, det_ignore: Optional[np.ndarray] = None) -> MatchResult:
    """Greedy matching for one image and one class.

    GTs flagged in ``gt_ignore`` are ignore regions: a detection that would
    otherwise be a FP but overlaps one of them at ``iou_thr`` is ignored.
    Unmatched detections flagged in ``det_ignore`` are ignored as well.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n, m = len(boxes), len(gt_boxes)
    gt_ignore = np.zeros(m, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    det_ignore = np.zeros(n, bool) if det_ignore is None else np.asarray(det_ignore, bool)
    tp = np.zeros(n, bool)
    ignored = np.zeros(n, bool)
    matched = np.full(n, -1)
    taken = np.zeros(m, bool)
    ious = iou_matrix(boxes, gt_boxes) if n and m else np.zeros((n, m))
    for i in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"):
        avail = ~taken & ~gt_ignore
        if avail.any():
            cand = np.where(avail, ious[i], -1.0)
            j = int(cand.argmax())
            if cand[j] >= iou_thr:
                tp[i] = True
                matched[i] = j
                taken[j] = True
                continue
        if (gt_ignore & (ious[i] >= iou_thr)).any() or det_ignore[i]:
            ignored[i] = True
    return MatchResult(tp, matched, ignored, int((~gt_ignore).sum()))


def pr_curve(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> Tuple[np.ndarray, np.ndarray]:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1.0 - hits)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-300)
    return recall, precision


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, points: Sequence[float]) -> float:
    """Mean envelope precision at the given recall points (0 where unreachable)."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, np.asarray(points), side="left")
    vals = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(vals.mean())


def area_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Exact area under the precision envelope (all-point interpolation)."""
    if len(recall) == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * env).sum())


COCO_POINTS = np.linspace(0.0, 1.0, 101)
KITTI_POINTS = np.linspace(1.0 / 40, 1.0, 40)


def average_precision(matches: Sequence[Tuple[np.ndarray, MatchResult]], points: Sequence[float] = COCO_POINTS,
                      method: str = "sampled") -> Optional[float]:
    """AP over all images of one class; ``matches`` holds (scores, MatchResult) pairs.

    Returns None when there is no ground truth. ``method="area"`` integrates
    the envelope exactly instead of sampling it.
    """
    n_gt = sum(m.n_gt for _, m in matches)
    if n_gt == 0:
        return None
    keep_scores, keep_tp = [], []
    for scores, m in matches:
        s = np.asarray(scores, dtype=np.float64)
        keep = ~m.ignored
        keep_scores.append(s[keep])
        keep_tp.append(m.tp[keep])
    scores = np.concatenate(keep_scores) if keep_scores else np.zeros(0)
    tp = np.concatenate(keep_tp) if keep_tp else np.zeros(0, bool)
    recall, precision = pr_curve(scores, tp, n_gt)
    if method == "area":
        return area_ap(recall, precision)
    return interpolated_ap(recall, precision, points)


def _class_matches(dets: Sequence[ImageDetections], gts: Sequence[ImageTruth], cls: int, thr: float):
    out = []
    for d, g in zip(dets, gts):
        dm = np.asarray(d.classes) == cls
        gm = np.asarray(g.classes) == cls
        scores = np.asarray(d.scores, dtype=np.float64)[dm]
        out.append((scores, match(np.asarray(d.boxes).reshape(-1, 4)[dm], scores, np.asarray(g.boxes).reshape(-1, 4)[gm], thr)))
    return out


def class_ids(gts: Sequence[ImageTruth]) -> List[int]:
    ids = set()
    for g in gts:
        ids.update(int(c) for c in np.asarray(g.classes))
    return sorted(ids)


def map_at(dets: Sequence[ImageDetections], gts: Sequence[ImageTruth],
           thresholds: Sequence[float] = (0.5,)) -> Optional[float]:
    """Mean over thresholds of the mean AP over classes that have ground truth."""
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    classes = class_ids(gts)
    if not classes:
        return None
    per_thr = []
    for thr in thresholds:
        aps = [average_precision(_class_matches(dets, gts, c, thr)) for c in classes]
        per_thr.append(float(np.mean([a for a in aps if a is not None])))
    return float(np.mean(per_thr))


@dataclass(frozen=True)
class DifficultyBucket:
    name: str
    min_height: float

    @classmethod
    def named(cls, name: str, image_size: int = KITTI_REFERENCE_SIZE) -> "DifficultyBucket":
        return cls(name, KITTI_MIN_HEIGHT[name] * image_size / KITTI_REFERENCE_SIZE)


def kitti_ap(dets: Sequence[ImageDetections], gts: Sequence[ImageTruth], bucket: DifficultyBucket,
             iou_thr: float = 0.5) -> Optional[float]:
    """40-point AP where GTs shorter than the bucket height are ignore regions
    and unmatched detections shorter than it are ignored."""
    classes = class_ids(gts)
    aps = []
    for c in classes:
        per_img = []
        for d, g in zip(dets, gts):
            dm = np.asarray(d.classes) == c
            gm = np.asarray(g.classes) == c
            db = np.asarray(d.boxes, dtype=np.float64).reshape(-1, 4)[dm]
            gb = np.asarray(g.boxes, dtype=np.float64).reshape(-1, 4)[gm]
            scores = np.asarray(d.scores, dtype=np.float64)[dm]
            m = match(db, scores, gb, iou_thr, gt_ignore=(gb[:, 3] - gb[:, 1]) < bucket.min_height,
                      det_ignore=(db[:, 3] - db[:, 1]) < bucket.min_height)
            per_img.append((scores, m))
        ap = average_precision(per_img, KITTI_POINTS)
        if ap is not None:
            aps.append(ap)
    return float(np.mean(aps)) if aps else None


def top1_accuracy(predicted: Sequence, truth: Sequence) -> float:
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions, {len(truth)} labels")
    if not len(truth):
        raise ValueError("top1_accuracy on empty input")
    return 100.0 * sum(p == t for p, t in zip(predicted, truth)) / len(truth)
