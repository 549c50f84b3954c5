"""Single-modality toy detector, the dual-branch fused detector, and the
anchor / box-coding / loss / NMS machinery they share."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boxes import center_to_corners, corners_to_center, iou_matrix
from .fusion import FusionBank
from .nn import Conv2d, Module
from .tensor import (
    Tensor,
    add,
    concat,
    make_op,
    no_grad,
    pool_and_resize,
    relu,
    reshape,
    stable_sigmoid,
    transpose,
)

STAGE_WIDTHS = (8, 16, 32, 32)
ASPECTS = (1.0, 2.0, 0.5)  # width / height
NUM_ANCHORS = len(ASPECTS)
LEVEL_STRIDES = (8, 16, 32, 64, 128)
SIZE_MULTIPLE = 128
FREEZE_MODES = ("tr", "rh", "th")


@dataclass
class DetectorConfig:
    image_size: int = 128
    cfeat: int = 8
    num_classes: int = 2
    alpha: float = 0.25
    gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    smooth_l1_beta: float = 0.1
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    pre_nms_top: int = 1000


@dataclass
class Detection:
    class_id: int
    score: float
    box: Tuple[float, float, float, float]  # x_min, y_min, x_max, y_max in pixels

    def to_json(self) -> dict:
        return {"class_id": int(self.class_id), "score": float(self.score), "box": [float(v) for v in self.box]}


# ---------------------------------------------------------------- networks


class Backbone(Module):
    """Four stride-2 stages; stage i has spatial size input / 2**(i+1).

    The first stage is a single strided conv; later stages add a 3x3 conv.
    """

    def __init__(self, in_channels: int, rng: np.random.Generator, widths: Sequence[int] = STAGE_WIDTHS):
        self.widths = tuple(widths)
        self.stages = []
        cin = in_channels
        for i, w in enumerate(self.widths):
            self.stages.append(_Stage(cin, w, rng, extra=i > 0))
            cin = w

    def forward(self, x: Tensor) -> List[Tensor]:
        h, w = x.shape[2:]
        if h % SIZE_MULTIPLE or w % SIZE_MULTIPLE:
            raise ValueError(f"image size {h}x{w} must be divisible by {SIZE_MULTIPLE}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class _Stage(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, extra: bool = True):
        self.down = Conv2d(cin, cout, 3, rng, stride=2)
        self.conv = Conv2d(cout, cout, 3, rng) if extra else None

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.down(x))
        return relu(self.conv(x)) if self.conv is not None else x


class Pyramid(Module):
    """Lateral 1x1 + top-down nearest upsampling + 3x3 smoothing; five levels.

    P3 and P4 tap the two deepest stages, P5 taps the deepest stage after a
    2x2 max-pool, and P6/P7 are successive 2x2 max-pools of P5.
    """

    def __init__(self, widths: Sequence[int], cfeat: int, rng: np.random.Generator):
        self.cfeat = cfeat
        self.lat3 = Conv2d(widths[2], cfeat, 1, rng)
        self.lat4 = Conv2d(widths[3], cfeat, 1, rng)
        self.lat5 = Conv2d(widths[3], cfeat, 1, rng)
        self.smooth3 = Conv2d(cfeat, cfeat, 3, rng)
        self.smooth4 = Conv2d(cfeat, cfeat, 3, rng)
        self.smooth5 = Conv2d(cfeat, cfeat, 3, rng)

    def forward(self, stages: Sequence[Tensor]) -> List[Tensor]:
        if len(stages) != 4:
            raise ValueError(f"pyramid expects 4 backbone stages, got {len(stages)}")
        c3, c4 = stages[2], stages[3]
        m5 = self.lat5(pool_and_resize(c4, "maxpool2"))
        m4 = add(self.lat4(c4), pool_and_resize(m5, "upsample_nearest2"))
        m3 = add(self.lat3(c3), pool_and_resize(m4, "upsample_nearest2"))
        p3, p4, p5 = self.smooth3(m3), self.smooth4(m4), self.smooth5(m5)
        p6 = pool_and_resize(p5, "maxpool2")
        p7 = pool_and_resize(p6, "maxpool2")
        return [p3, p4, p5, p6, p7]


class DetectorHead(Module):
    """Class and box branches shared across all pyramid levels."""

    def __init__(self, cfeat: int, num_classes: int, rng: np.random.Generator, prior: float = 0.01):
        self.num_classes = num_classes
        self.cls_convs = [Conv2d(cfeat, cfeat, 3, rng) for _ in range(2)]
        self.cls_out = Conv2d(cfeat, NUM_ANCHORS * num_classes, 3, rng, init="uniform")
        self.cls_out.weight.data *= 0.1
        self.cls_out.bias.data[:] = -math.log((1 - prior) / prior)
        self.box_convs = [Conv2d(cfeat, cfeat, 3, rng) for _ in range(2)]
        self.box_out = Conv2d(cfeat, NUM_ANCHORS * 4, 3, rng, init="uniform")
        self.box_out.weight.data *= 0.1

    def forward(self, pyramid: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        """Return class logits ``[B, N, K]`` and box offsets ``[B, N, 4]`` in anchor order."""
        cls_rows, box_rows = [], []
        for p in pyramid:
            c = p
            for conv in self.cls_convs:
                c = relu(conv(c))
            b = p
            for conv in self.box_convs:
                b = relu(conv(b))
            cls_rows.append(_anchor_rows(self.cls_out(c), self.num_classes))
            box_rows.append(_anchor_rows(self.box_out(b), 4))
        return concat(cls_rows, 1), concat(box_rows, 1)


def _anchor_rows(x: Tensor, per: int) -> Tensor:
    b, _, h, w = x.shape
    return reshape(transpose(x, (0, 2, 3, 1)), (b, h * w * NUM_ANCHORS, per))


class SingleDetector(Module):
    """Backbone -> pyramid -> head for one modality."""

    def __init__(self, in_channels: int, config: DetectorConfig, rng: np.random.Generator, modality: str = "rgb"):
        self.modality = modality
        self.config = config
        self.backbone = Backbone(in_channels, rng)
        self.fpn = Pyramid(self.backbone.widths, config.cfeat, rng)
        self.head = DetectorHead(config.cfeat, config.num_classes, rng)

    def features(self, images: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        stages = self.backbone(images)
        return stages, self.fpn(stages)

    def forward(self, images: Tensor) -> Tuple[Tensor, Tensor]:
        _, pyr = self.features(images)
        return self.head(pyr)


class FusedDetector(Module):
    """Two single-modality branches whose pyramids are fused level by level
    and fed to one shared head."""

    def __init__(self, rgb: SingleDetector, x: SingleDetector, bank: FusionBank, head_mode: str = "th"):
        if head_mode not in FREEZE_MODES:
            raise ValueError(f"head mode must be one of {FREEZE_MODES}, got {head_mode!r}")
        self.rgb = rgb
        self.x = x
        self.bank = bank
        self.head_mode = head_mode
        source = rgb.head if head_mode == "rh" else x.head
        self.head = copy.deepcopy(source)
        self.rgb.freeze()
        self.x.freeze()
        self.head.freeze(head_mode != "tr")

    @property
    def config(self) -> DetectorConfig:
        return self.rgb.config

    def head_for(self, bank: Optional[FusionBank] = None) -> DetectorHead:
        bank = self.bank if bank is None else bank
        return bank.head if bank is not None and bank.head is not None else self.head

    def fuse(self, pyr_rgb: Sequence[Tensor], pyr_x: Sequence[Tensor], bank: Optional[FusionBank] = None) -> List[Tensor]:
        bank = self.bank if bank is None else bank
        if len(bank.modules) != len(pyr_rgb):
            raise ValueError(f"fusion bank has {len(bank.modules)} levels, pyramid has {len(pyr_rgb)}")
        return bank(pyr_rgb, pyr_x)

    def forward(self, rgb: Tensor, x: Tensor, bank: Optional[FusionBank] = None) -> Tuple[Tensor, Tensor]:
        _, pr = self.rgb.features(rgb)
        _, px = self.x.features(x)
        return self.head_for(bank)(self.fuse(pr, px, bank))


# ---------------------------------------------------------------- anchors and box coding


def anchors_for(image_size: int) -> np.ndarray:
    """Anchors as ``[N, 4]`` center boxes (cx, cy, w, h), ordered by level, row, col, aspect."""
    if image_size % SIZE_MULTIPLE:
        raise ValueError(f"image size {image_size} must be divisible by {SIZE_MULTIPLE}")
    out = []
    for stride in LEVEL_STRIDES:
        n = image_size // stride
        base = 4.0 * stride
        for row in range(n):
            for col in range(n):
                cx, cy = (col + 0.5) * stride, (row + 0.5) * stride
                for ar in ASPECTS:
                    out.append((cx, cy, base * math.sqrt(ar), base / math.sqrt(ar)))
    return np.array(out, dtype=np.float64)


def anchor_level_counts(image_size: int) -> List[int]:
    return [NUM_ANCHORS * (image_size // s) ** 2 for s in LEVEL_STRIDES]


def box_encode(box: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Offsets of center box(es) ``box`` relative to ``anchor``."""
    box = np.asarray(box, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(box[..., 2:] <= 0) or np.any(anchor[..., 2:] <= 0):
        raise ValueError("box_encode: widths and heights must be positive")
    return np.stack([(box[..., 0] - anchor[..., 0]) / anchor[..., 2],
                     (box[..., 1] - anchor[..., 1]) / anchor[..., 3],
                     np.log(box[..., 2] / anchor[..., 2]),
                     np.log(box[..., 3] / anchor[..., 3])], axis=-1)


MAX_LOG_SCALE = math.log(1000.0 / 16)


def box_decode(offsets: np.ndarray, anchor: np.ndarray, clamp: bool = False) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(anchor[..., 2:] <= 0):
        raise ValueError("box_decode: anchor widths and heights must be positive")
    dw, dh = offsets[..., 2], offsets[..., 3]
    if clamp:
        dw = np.minimum(dw, MAX_LOG_SCALE)
        dh = np.minimum(dh, MAX_LOG_SCALE)
    return np.stack([anchor[..., 0] + offsets[..., 0] * anchor[..., 2],
                     anchor[..., 1] + offsets[..., 1] * anchor[..., 3],
                     anchor[..., 2] * np.exp(dw),
                     anchor[..., 3] * np.exp(dh)], axis=-1)


# ---------------------------------------------------------------- loss


@dataclass
class AnchorTargets:
    labels: np.ndarray  # [N, K] in {0, 1}
    valid: np.ndarray  # [N] bool, False for ignored anchors
    positive: np.ndarray  # [N] bool
    box_targets: np.ndarray  # [N, 4], meaningful where positive


def assign_targets(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray, num_classes: int,
                   pos_iou: float = 0.5, neg_iou: float = 0.4) -> AnchorTargets:
    """IoU matching: >= pos_iou positive, < neg_iou negative, otherwise ignored."""
    n = len(anchors)
    labels = np.zeros((n, num_classes))
    box_targets = np.zeros((n, 4))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return AnchorTargets(labels, np.ones(n, bool), np.zeros(n, bool), box_targets)
    ious = iou_matrix(center_to_corners(anchors), gt_boxes)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    positive = best_iou >= pos_iou
    valid = positive | (best_iou < neg_iou)
    cls = np.asarray(gt_classes, dtype=int)[best]
    labels[np.nonzero(positive)[0], cls[positive]] = 1.0
    if positive.any():
        box_targets[positive] = box_encode(corners_to_center(gt_boxes[best[positive]]), anchors[positive])
    return AnchorTargets(labels, valid, positive, box_targets)


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def focal_terms(z: np.ndarray, y: np.ndarray, alpha: float, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise focal loss and its derivative with respect to the logit."""
    p = stable_sigmoid(z)
    log_p = -_softplus(-z)
    log_q = -_softplus(z)
    pos = y > 0.5
    loss = np.where(pos, -alpha * (1 - p) ** gamma * log_p, -(1 - alpha) * p ** gamma * log_q)
    if gamma == 0:
        d_pos = alpha * (-(1 - p))
        d_neg = (1 - alpha) * p
    else:
        d_pos = alpha * (1 - p) ** gamma * (gamma * p * log_p - (1 - p))
        d_neg = (1 - alpha) * p ** gamma * (p - gamma * (1 - p) * log_q)
    return loss, np.where(pos, d_pos, d_neg)


def smooth_l1_terms(d: np.ndarray, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    a = np.abs(d)
    small = a < beta
    loss = np.where(small, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(small, d / beta, np.sign(d))
    return loss, grad


def detection_loss(cls_logits: Tensor, box_offsets: Tensor, anchors: np.ndarray,
                   gts: Sequence[Tuple[np.ndarray, np.ndarray]], config: DetectorConfig) -> Tensor:
    """Focal classification loss over non-ignored anchors plus smooth-L1 box
    loss over positive anchors, normalized by the number of positives (min 1).

    ``gts`` holds one ``(boxes[M,4] corners, classes[M])`` pair per image.
    """
    B, N, K = cls_logits.shape
    if len(gts) != B:
        raise ValueError(f"got {len(gts)} ground-truth entries for batch of {B}")
    z = cls_logits.data
    d = box_offsets.data
    g_cls = np.zeros_like(z)
    g_box = np.zeros_like(d)
    total = 0.0
    num_pos = 0
    for i, (boxes, classes) in enumerate(gts):
        t = assign_targets(anchors, boxes, classes, K, config.pos_iou, config.neg_iou)
        fl, dfl = focal_terms(z[i], t.labels, config.alpha, config.gamma)
        v = t.valid[:, None]
        total += float((fl * v).sum())
        g_cls[i] = dfl * v
        if t.positive.any():
            diff = d[i][t.positive] - t.box_targets[t.positive]
            sl, dsl = smooth_l1_terms(diff, config.smooth_l1_beta)
            total += float(sl.sum())
            g_box[i][t.positive] = dsl
        num_pos += int(t.positive.sum())
    norm = float(max(1, num_pos))
    value = np.array(total / norm)

    def bw(g):
        s = float(g) / norm
        return [g_cls * s, g_box * s]

    return make_op(value, [cls_logits, box_offsets], bw)


# ---------------------------------------------------------------- post-processing


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray, iou_threshold: float = 0.5) -> List[int]:
    """Greedy per-class suppression; returns kept indices in descending-score order.

    Equal scores keep their input order (stable sort).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(len(scores), bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[(~suppressed[rest]) & (classes[rest] == classes[i])]
        if len(rest):
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ious >= iou_threshold]] = True
    return keep


def postprocess(cls_logits: np.ndarray, box_offsets: np.ndarray, anchors: np.ndarray,
                config: DetectorConfig) -> List[Detection]:
    """Scores, decode, clip, and per-class NMS for one image."""
    if not (np.all(np.isfinite(cls_logits)) and np.all(np.isfinite(box_offsets))):
        raise FloatingPointError("detector produced non-finite outputs (untrained or corrupted weights?)")
    scores = stable_sigmoid(cls_logits)  # [N, K]
    flat = scores.reshape(-1)
    cand = np.nonzero(flat >= config.score_threshold)[0]
    if len(cand) > config.pre_nms_top:
        top = np.argsort(-flat[cand], kind="stable")[: config.pre_nms_top]
        cand = np.sort(cand[top])
    K = scores.shape[1]
    anchor_idx, cls_idx = cand // K, cand % K
    boxes = center_to_corners(box_decode(box_offsets[anchor_idx], anchors[anchor_idx], clamp=True))
    size = config.image_size
    boxes = np.clip(boxes, 0, size)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, anchor_idx, cls_idx, sc = boxes[ok], anchor_idx[ok], cls_idx[ok], flat[cand][ok]
    keep = nms(boxes, sc, cls_idx, config.nms_iou)[: config.max_detections]
    return [Detection(int(cls_idx[k]), float(sc[k]), tuple(float(v) for v in boxes[k])) for k in keep]


def detect_single(images: np.ndarray, detector: SingleDetector) -> List[List[Detection]]:
    """Run one branch on ``[B, C, H, W]`` images (or a single ``[C, H, W]``)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    anchors = anchors_for(images.shape[2])
    with no_grad():
        cls, box = detector(Tensor(images))
    return [postprocess(cls.data[i], box.data[i], anchors, detector.config) for i in range(len(images))]


def detect_fused(rgb: np.ndarray, x: np.ndarray, detector: FusedDetector,
                 bank: Optional[FusionBank] = None) -> List[List[Detection]]:
    rgb = np.asarray(rgb, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if rgb.ndim == 3:
        rgb, x = rgb[None], x[None]
    anchors = anchors_for(rgb.shape[2])
    with no_grad():
        cls, box = detector(Tensor(rgb), Tensor(x), bank)
    return [postprocess(cls.data[i], box.data[i], anchors, detector.config) for i in range(len(rgb))]


def detect_from_pyramids(pyr_rgb: Sequence[np.ndarray], pyr_x: Sequence[np.ndarray], detector: FusedDetector,
                         bank: FusionBank) -> List[List[Detection]]:
    """Fused detection on precomputed (frozen) pyramids, one array per level."""
    anchors = anchors_for(detector.config.image_size)
    with no_grad():
        fused = detector.fuse([Tensor(p) for p in pyr_rgb], [Tensor(p) for p in pyr_x], bank)
        cls, box = detector.head_for(bank)(fused)
    return [postprocess(cls.data[i], box.data[i], anchors, detector.config) for i in range(cls.shape[0])]
