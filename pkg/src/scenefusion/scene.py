"""Scene classification, per-scene fusion training, and scene-routed inference."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import subsample
from .detector import Detection, FusedDetector, postprocess, anchors_for
from .fusion import FusionBank
from .nn import Adam, Linear, Module, Parameter
from .tensor import Tensor, make_op, no_grad
from .training import BATCH_SIZE, LR, LR_GAMMA, WEIGHT_DECAY, FeatureSet, TrainLog, batches, fit_fusion

log = logging.getLogger(__name__)

AGNOSTIC = "agnostic"
STD_FLOOR = 1e-6


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    z = logits.data
    b = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = np.array(-logp[np.arange(b), labels].mean())

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(b), labels] -= 1.0
        return [grad * (float(g) / b)]

    return make_op(value, [logits], bw)


class SceneClassifier(Module):
    """Global average pooling of the deepest RGB stage followed by one linear layer.

    Pooled features are standardized with fixed statistics of the training
    split (frozen, stored with the weights) before the linear layer.
    """

    def __init__(self, taxonomy: Sequence[str], in_features: int, rng: np.random.Generator):
        self.taxonomy = list(taxonomy)
        self.fc = Linear(in_features, len(self.taxonomy), rng)
        self.feat_mean = Parameter(np.zeros(in_features), frozen=True)
        self.feat_std = Parameter(np.ones(in_features), frozen=True)

    def fit_normalization(self, pooled: np.ndarray) -> None:
        pooled = np.asarray(pooled, dtype=np.float64)
        self.feat_mean.data = pooled.mean(axis=0)
        self.feat_std.data = np.maximum(pooled.std(axis=0), STD_FLOOR)

    def logits(self, pooled: Tensor) -> Tensor:
        m, s = self.feat_mean.data, self.feat_std.data
        z = make_op((pooled.data - m) / s, [pooled], lambda g: [g / s])
        return self.fc(z)

    def probabilities(self, pooled: np.ndarray) -> np.ndarray:
        pooled = np.asarray(pooled, dtype=np.float64)
        if pooled.ndim == 1:
            pooled = pooled[None]
        out_dim = self.fc.weight.shape[0]
        if out_dim != len(self.taxonomy):
            raise ValueError(f"classifier has {out_dim} outputs but taxonomy has {len(self.taxonomy)} scenes")
        with no_grad():
            return softmax(self.logits(Tensor(pooled)).data)


def pooled_deep_features(system: "TrainedSystem", rgb: np.ndarray) -> Tuple[np.ndarray, list]:
    """Return pooled deepest-stage features and the RGB pyramid, sharing one backbone pass."""
    with no_grad():
        stages, pyr = system.fused.rgb.features(Tensor(rgb))
    return stages[-1].data.mean(axis=(2, 3)), [p.data for p in pyr]


def classify_scene(rgb: np.ndarray, system: "TrainedSystem") -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    single = rgb.ndim == 3
    pooled, _ = pooled_deep_features(system, rgb[None] if single else rgb)
    probs = system.classifier.probabilities(pooled)
    return probs[0] if single else probs


def train_classifier(classifier: SceneClassifier, feats: FeatureSet, epochs: int = 50, lr: float = LR,
                     batch_size: int = BATCH_SIZE, seed: int = 0) -> TrainLog:
    """Cross-entropy training of the linear layer on frozen pooled RGB features."""
    if len(feats) == 0:
        raise ValueError("train_classifier: empty training split")
    index = {s: i for i, s in enumerate(classifier.taxonomy)}
    unknown = sorted(set(feats.scenes) - set(index))
    if unknown:
        raise ValueError(f"labels outside taxonomy {classifier.taxonomy}: {unknown}")
    labels = np.array([index[s] for s in feats.scenes])
    classifier.fit_normalization(feats.deep)
    opt = Adam(classifier.parameters(), lr=lr, weight_decay=WEIGHT_DECAY, gamma=LR_GAMMA)
    rng = np.random.default_rng(seed)
    out = TrainLog()
    for epoch in range(epochs):
        total = 0.0
        for idx in batches(len(feats), batch_size, rng):
            loss = softmax_cross_entropy(classifier.logits(Tensor(feats.deep[idx])), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        out.add(epoch, total / len(feats), opt.lr)
        opt.end_epoch()
    return out


@dataclass
class TrainedSystem:
    fused: FusedDetector  # both branches, the (possibly frozen) head, and a template bank
    classifier: SceneClassifier
    banks: Dict[str, FusionBank] = field(default_factory=dict)
    agnostic: Optional[FusionBank] = None

    @property
    def taxonomy(self) -> List[str]:
        return self.classifier.taxonomy


def new_bank(system: TrainedSystem, scene: str, seed: int, kind: str | None = None) -> FusionBank:
    kind = system.fused.bank.kind if kind is None else kind
    bank = FusionBank(scene, system.fused.config.cfeat, np.random.default_rng(seed), kind)
    if system.fused.head_mode == "tr":
        bank.head = copy.deepcopy(system.fused.head)
        bank.head.freeze(False)
    return bank


def train_fusion(system: TrainedSystem, scene: str, feats: FeatureSet, epochs: int = 50, lr: float = LR,
                 fraction: float = 100.0, seed: int = 0, kind: str | None = None) -> FusionBank:
    """Train a fresh bank for ``scene`` (or ``"agnostic"`` for all scenes).

    ``fraction`` percent of the matching split is used, stratified by scene in
    agnostic mode. The per-epoch log is attached as ``bank.train_log``.
    """
    subset = feats if scene == AGNOSTIC else feats.of_scenes([scene])
    if len(subset) == 0:
        raise ValueError(f"no training samples for scene {scene!r}")
    if fraction < 100:
        scenes = dict(zip(subset.ids, subset.scenes)) if scene == AGNOSTIC else None
        subset = subset.select_ids(subsample(subset.ids, fraction, seed, scenes))
    if len(subset) == 0:
        raise ValueError(f"fraction {fraction}% leaves no samples for scene {scene!r}")
    bank = new_bank(system, scene, seed, kind)
    bank.train_log = fit_fusion(system.fused, bank, subset, epochs, lr, seed=seed)
    bank.train_size = len(subset)
    return bank


def route(probabilities: np.ndarray, banks: Mapping[str, FusionBank], taxonomy: Sequence[str]) -> FusionBank:
    """Bank of the most probable scene; ties go to the lowest scene index."""
    probabilities = np.asarray(probabilities)
    if len(probabilities) != len(taxonomy):
        raise ValueError(f"{len(probabilities)} probabilities for {len(taxonomy)} scenes")
    scene = taxonomy[int(np.argmax(probabilities))]
    if scene not in banks:
        raise KeyError(f"no fusion bank for scene {scene!r}")
    return banks[scene]


def detect_with_bank(system: TrainedSystem, pyr_rgb: Sequence[np.ndarray], pyr_x: Sequence[np.ndarray],
                     bank: FusionBank) -> List[List[Detection]]:
    anchors = anchors_for(system.fused.config.image_size)
    with no_grad():
        fused = system.fused.fuse([Tensor(p) for p in pyr_rgb], [Tensor(p) for p in pyr_x], bank)
        cls, box = system.fused.head_for(bank)(fused)
    return [postprocess(cls.data[i], box.data[i], anchors, system.fused.config) for i in range(cls.shape[0])]


def adaptive_from_features(system: TrainedSystem, pyr_rgb: Sequence[np.ndarray], pyr_x: Sequence[np.ndarray],
                           deep: np.ndarray) -> Tuple[List[List[Detection]], List[str]]:
    """Route every image by its own scene probabilities; images sharing a bank run batched."""
    probs = system.classifier.probabilities(deep)
    chosen = [route(p, system.banks, system.taxonomy).scene for p in probs]
    out: List[Optional[List[Detection]]] = [None] * len(chosen)
    for scene in dict.fromkeys(chosen):
        pos = np.array([i for i, c in enumerate(chosen) if c == scene])
        dets = detect_with_bank(system, [a[pos] for a in pyr_rgb], [a[pos] for a in pyr_x], system.banks[scene])
        for i, d in zip(pos, dets):
            out[i] = d
    return out, chosen


def detect_scene_adaptive(rgb: np.ndarray, x: np.ndarray, system: TrainedSystem) -> Tuple[List[Detection], str]:
    """Classify the scene from the RGB image, pick that scene's bank, and detect."""
    rgb = np.asarray(rgb, dtype=np.float64)[None]
    x = np.asarray(x, dtype=np.float64)[None]
    deep, pyr_rgb = pooled_deep_features(system, rgb)
    with no_grad():
        _, px = system.fused.x.features(Tensor(x))
    dets, chosen = adaptive_from_features(system, pyr_rgb, [p.data for p in px], deep)
    return dets[0], chosen[0]


def train_excluding(system: TrainedSystem, excluded: str, feats: FeatureSet, epochs: int = 50,
                    classifier_epochs: int = 50, lr: float = LR, seed: int = 0) -> TrainedSystem:
    """Rebuild classifier and scene banks without ``excluded``; test images of
    that scene are then routed to whichever known scene the classifier prefers."""
    if excluded not in system.taxonomy:
        raise ValueError(f"scene {excluded!r} not in taxonomy {system.taxonomy}")
    remaining = [s for s in system.taxonomy if s != excluded]
    if not remaining:
        raise ValueError("cannot exclude the only scene")
    kept = feats.of_scenes(remaining)
    classifier = SceneClassifier(remaining, feats.deep.shape[1], np.random.default_rng(seed))
    train_classifier(classifier, kept, classifier_epochs, lr, seed=seed)
    out = TrainedSystem(system.fused, classifier, agnostic=system.agnostic)
    for i, scene in enumerate(remaining):
        out.banks[scene] = train_fusion(out, scene, kept, epochs, lr, seed=seed + 1 + system.taxonomy.index(scene))
    return out
