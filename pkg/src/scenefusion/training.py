"""Training loops for single-modality detectors and fusion banks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .data import SceneSample
from .detector import FusedDetector, SingleDetector, anchors_for, detection_loss
from .fusion import FusionBank
from .nn import Adam
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

BATCH_SIZE = 8
LR = 1e-3
WEIGHT_DECAY = 1e-3
LR_GAMMA = 0.97


@dataclass
class TrainLog:
    rows: List[Tuple[int, float, float]] = field(default_factory=list)

    def add(self, epoch: int, loss: float, lr: float) -> None:
        self.rows.append((epoch, loss, lr))

    def to_text(self) -> str:
        return "epoch,loss,lr\n" + "".join(f"{e},{l:.10g},{r:.10g}\n" for e, l, r in self.rows)

    @property
    def losses(self) -> List[float]:
        return [r[1] for r in self.rows]


def batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def modality_images(samples: Sequence[SceneSample], modality: str) -> np.ndarray:
    if modality == "rgb":
        return np.stack([s.rgb for s in samples])
    if modality == "x":
        return np.stack([s.x for s in samples])
    raise ValueError(f"unknown modality {modality!r}")


def _check_loss(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite training loss at epoch {epoch}, step {step}")


def train_detector(detector: SingleDetector, samples: Sequence[SceneSample], epochs: int, lr: float = LR,
                   batch_size: int = BATCH_SIZE, seed: int = 0,
                   progress: Optional[Callable[[int, float], None]] = None) -> TrainLog:
    """End-to-end training of one branch on its own modality."""
    if not samples:
        raise ValueError("train_detector: empty training split")
    images = modality_images(samples, detector.modality)
    gts = [(s.boxes, s.classes) for s in samples]
    anchors = anchors_for(images.shape[-1])
    opt = Adam(detector.parameters(), lr=lr, weight_decay=WEIGHT_DECAY, gamma=LR_GAMMA)
    rng = np.random.default_rng(seed)
    out = TrainLog()
    for epoch in range(epochs):
        total, count = 0.0, 0
        for step, idx in enumerate(batches(len(samples), batch_size, rng)):
            cls, box = detector(Tensor(images[idx]))
            loss = detection_loss(cls, box, anchors, [gts[i] for i in idx], detector.config)
            _check_loss(loss.item(), epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        out.add(epoch, total / count, opt.lr)
        if progress:
            progress(epoch, total / count)
        opt.end_epoch()
    return out


def pyramid_cache(detector: SingleDetector, samples: Sequence[SceneSample], batch_size: int = 32,
                  with_deep: bool = False):
    """Frozen pyramid features for every sample, one ``[N, C, h, w]`` array per level.

    With ``with_deep`` also returns the globally averaged deepest backbone stage ``[N, Cdeep]``.
    """
    images = modality_images(samples, detector.modality)
    levels: List[List[np.ndarray]] = []
    deep: List[np.ndarray] = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            stages, pyr = detector.features(Tensor(images[i:i + batch_size]))
            levels.append([p.data for p in pyr])
            deep.append(stages[-1].data.mean(axis=(2, 3)))
    pyramid = [np.concatenate([chunk[l] for chunk in levels]) for l in range(len(levels[0]))]
    if with_deep:
        return pyramid, np.concatenate(deep)
    return pyramid


@dataclass
class FeatureSet:
    """Cached frozen features of both branches for a list of samples."""

    ids: List[int]
    rgb: List[np.ndarray]
    x: List[np.ndarray]
    deep: np.ndarray  # pooled deepest RGB stage, [N, Cdeep]
    gts: List[Tuple[np.ndarray, np.ndarray]]
    scenes: List[str]

    def subset(self, positions: Sequence[int]) -> "FeatureSet":
        pos = np.asarray(positions, dtype=int)
        return FeatureSet([self.ids[i] for i in pos], [a[pos] for a in self.rgb], [a[pos] for a in self.x],
                          self.deep[pos], [self.gts[i] for i in pos], [self.scenes[i] for i in pos])

    def select_ids(self, ids: Sequence[int]) -> "FeatureSet":
        where = {sid: i for i, sid in enumerate(self.ids)}
        return self.subset([where[i] for i in ids])

    def of_scenes(self, scenes: Sequence[str]) -> "FeatureSet":
        return self.subset([i for i, s in enumerate(self.scenes) if s in scenes])

    def __len__(self) -> int:
        return len(self.ids)


def build_features(rgb_det: SingleDetector, x_det: SingleDetector, samples: Sequence[SceneSample]) -> FeatureSet:
    pr, deep = pyramid_cache(rgb_det, samples, with_deep=True)
    return FeatureSet([s.id for s in samples], pr, pyramid_cache(x_det, samples), deep,
                      [(s.boxes, s.classes) for s in samples], [s.scene for s in samples])


def fit_fusion(fused: FusedDetector, bank: FusionBank, feats: FeatureSet, epochs: int, lr: float = LR,
               batch_size: int = BATCH_SIZE, seed: int = 0) -> TrainLog:
    """Train ``bank`` (and the head, if it is not frozen) on cached pyramids.

    Branch parameters never enter the graph; frozen parameters are skipped by
    the optimizer.
    """
    if len(feats) == 0:
        raise ValueError("fit_fusion: empty training split")
    head = fused.head_for(bank)
    params = bank.parameters() + (head.parameters() if head is not bank.head else [])
    opt = Adam(params, lr=lr, weight_decay=WEIGHT_DECAY, gamma=LR_GAMMA)
    anchors = anchors_for(fused.config.image_size)
    rng = np.random.default_rng(seed)
    out = TrainLog()
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(batches(len(feats), batch_size, rng)):
            fused_pyr = bank([Tensor(a[idx]) for a in feats.rgb], [Tensor(a[idx]) for a in feats.x])
            cls, box = head(fused_pyr)
            loss = detection_loss(cls, box, anchors, [feats.gts[i] for i in idx], fused.config)
            _check_loss(loss.item(), epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        out.add(epoch, total / len(feats), opt.lr)
        opt.end_epoch()
    return out
