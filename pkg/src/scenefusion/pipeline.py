"""End-to-end experiment: data, branch pretraining, classifier, fusion banks,
and the four-way evaluation (rgb-only, x-only, scene-agnostic, scene-adaptive)."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import store
from .data import Dataset, SplitSpec, generate_dataset, load_dataset
from .detector import Detection, DetectorConfig, FusedDetector, SingleDetector, anchors_for, postprocess
from .fusion import FusionBank, fusion_param_formula, param_count
from .metrics import (
    COCO_THRESHOLDS,
    DifficultyBucket,
    ImageDetections,
    ImageTruth,
    kitti_ap,
    map_at,
    top1_accuracy,
)
from .scene import (
    AGNOSTIC,
    SceneClassifier,
    TrainedSystem,
    adaptive_from_features,
    detect_with_bank,
    train_classifier,
    train_excluding,
    train_fusion,
)
from .tensor import Tensor, no_grad
from .training import FeatureSet, build_features, train_detector

log = logging.getLogger(__name__)

METRICS_SCHEMA = "scenefusion.metrics"
METRICS_VERSION = 1
METHODS = ("rgb-only", "x-only", "scene-agnostic", "scene-adaptive")


@dataclass
class RunConfig:
    image_size: int = 128
    cfeat: int = 8
    taxonomy: List[str] = field(default_factory=lambda: ["day", "night", "fog"])
    counts: Tuple[int, int, int] = (200, 50, 50)
    lr: float = 1e-3
    detector_epochs: int = 20
    fusion_epochs: int = 50
    classifier_epochs: int = 50
    batch_size: int = 8
    seed: int = 42
    head: str = "th"
    module: str = "cbam"
    fraction: float = 100.0
    excluded: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["counts"] = tuple(d.get("counts", (200, 50, 50)))
        return cls(**d)

    def split_spec(self) -> SplitSpec:
        return SplitSpec({s: tuple(self.counts) for s in self.taxonomy}, self.seed, self.image_size)

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(image_size=self.image_size, cfeat=self.cfeat)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("RXF_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- detections <-> metric inputs


def to_image_detections(dets: Sequence[Detection]) -> ImageDetections:
    return ImageDetections(np.array([d.box for d in dets], dtype=np.float64).reshape(-1, 4),
                           np.array([d.score for d in dets], dtype=np.float64),
                           np.array([d.class_id for d in dets], dtype=np.int64))


def truths(feats: FeatureSet) -> List[ImageTruth]:
    return [ImageTruth(b, c) for b, c in feats.gts]


def single_branch_detections(det: SingleDetector, pyramid: Sequence[np.ndarray], batch: int = 64) -> List[List[Detection]]:
    anchors = anchors_for(det.config.image_size)
    out: List[List[Detection]] = []
    n = len(pyramid[0])
    for i in range(0, n, batch):
        with no_grad():
            cls, box = det.head([Tensor(p[i:i + batch]) for p in pyramid])
        with ThreadPoolExecutor(threads()) as pool:
            out.extend(pool.map(lambda j: postprocess(cls.data[j], box.data[j], anchors, det.config), range(cls.shape[0])))
    return out


def bank_detections(system: TrainedSystem, feats: FeatureSet, bank: FusionBank, batch: int = 64) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    for i in range(0, len(feats), batch):
        out.extend(detect_with_bank(system, [a[i:i + batch] for a in feats.rgb], [a[i:i + batch] for a in feats.x], bank))
    return out


def adaptive_detections(system: TrainedSystem, feats: FeatureSet, batch: int = 64) -> Tuple[List[List[Detection]], List[str]]:
    dets: List[List[Detection]] = []
    chosen: List[str] = []
    for i in range(0, len(feats), batch):
        d, c = adaptive_from_features(system, [a[i:i + batch] for a in feats.rgb], [a[i:i + batch] for a in feats.x],
                                      feats.deep[i:i + batch])
        dets.extend(d)
        chosen.extend(c)
    return dets, chosen


# ---------------------------------------------------------------- metric records


def detection_records(method: str, dets: Sequence[Sequence[Detection]], gts: Sequence[ImageTruth],
                      scenes: Sequence[str], taxonomy: Sequence[str], image_size: int,
                      class_names: Sequence[str] = ("box", "disc")) -> List[dict]:
    records = []
    idets = [to_image_detections(d) for d in dets]
    groups = [("all", list(range(len(gts))))] + [(s, [i for i, sc in enumerate(scenes) if sc == s]) for s in taxonomy]
    for scene, pos in groups:
        if not pos:
            continue
        d = [idets[i] for i in pos]
        g = [gts[i] for i in pos]

        def rec(metric, value, cls="all"):
            if value is not None:
                records.append({"method": method, "metric": metric, "scene": scene, "class": cls, "value": float(value)})

        rec("mAP@0.5", map_at(d, g, (0.5,)))
        rec("mAP@0.75", map_at(d, g, (0.75,)))
        rec("mAP@0.5:0.95", map_at(d, g, COCO_THRESHOLDS))
        for name in ("easy", "moderate", "hard"):
            rec(f"KITTI-AP-{name}", kitti_ap(d, g, DifficultyBucket.named(name, image_size)))
        for c, cname in enumerate(class_names):
            dc = [ImageDetections(x.boxes[x.classes == c], x.scores[x.classes == c], x.classes[x.classes == c]) for x in d]
            gc = [ImageTruth(x.boxes[np.asarray(x.classes) == c], np.asarray(x.classes)[np.asarray(x.classes) == c]) for x in g]
            rec("AP@0.5", map_at(dc, gc, (0.5,)), cname)
    return records


def metrics_document(records: List[dict], extra: dict | None = None) -> dict:
    doc = {"schema": METRICS_SCHEMA, "version": METRICS_VERSION, "records": records}
    if extra:
        doc.update(extra)
    return doc


def lookup(records: Sequence[dict], method: str, metric: str = "mAP@0.5", scene: str = "all", cls: str = "all") -> Optional[float]:
    for r in records:
        if r["method"] == method and r["metric"] == metric and r["scene"] == scene and r["class"] == cls:
            return r["value"]
    return None


def metrics_table(records: Sequence[dict]) -> str:
    cols = ["mAP@0.5", "mAP@0.75", "mAP@0.5:0.95", "KITTI-AP-easy", "KITTI-AP-moderate", "KITTI-AP-hard"]
    methods = list(dict.fromkeys(r["method"] for r in records if r["metric"] in cols))
    scenes = list(dict.fromkeys(r["scene"] for r in records if r["metric"] in cols))
    lines = [f"{'method':<16}{'scene':<9}" + "".join(f"{c:>19}" for c in cols)]
    for m in methods:
        for s in scenes:
            vals = [lookup(records, m, c, s) for c in cols]
            if all(v is None for v in vals):
                continue
            lines.append(f"{m:<16}{s:<9}" + "".join(f"{'-' if v is None else f'{v:.4f}':>19}" for v in vals))
    top = [r for r in records if r["metric"] == "top1"]
    for r in top:
        lines.append(f"{r['method']:<16}{r['scene']:<9}top1={r['value']:.2f}%")
    return "\n".join(lines) + "\n"


def evaluate_system(system: TrainedSystem, feats: FeatureSet, methods: Sequence[str] = METHODS) -> List[dict]:
    gts = truths(feats)
    taxonomy = system.taxonomy
    size = system.fused.config.image_size
    all_scenes = list(dict.fromkeys(list(taxonomy) + list(feats.scenes)))
    records: List[dict] = []
    for method in methods:
        if method == "rgb-only":
            dets = single_branch_detections(system.fused.rgb, feats.rgb)
        elif method == "x-only":
            dets = single_branch_detections(system.fused.x, feats.x)
        elif method == "scene-agnostic":
            if system.agnostic is None:
                continue
            dets = bank_detections(system, feats, system.agnostic)
        elif method == "scene-adaptive":
            dets, chosen = adaptive_detections(system, feats)
            known = [i for i, s in enumerate(feats.scenes) if s in taxonomy]
            if known:
                records.append({"method": "classifier", "metric": "top1", "scene": "all", "class": "all",
                                "value": top1_accuracy([chosen[i] for i in known], [feats.scenes[i] for i in known])})
                for s in taxonomy:
                    pos = [i for i in known if feats.scenes[i] == s]
                    if pos:
                        records.append({"method": "classifier", "metric": "top1", "scene": s, "class": "all",
                                        "value": top1_accuracy([chosen[i] for i in pos], [s] * len(pos))})
        else:
            raise ValueError(f"unknown method {method!r}")
        records.extend(detection_records(method, dets, gts, feats.scenes, all_scenes, size))
    return records


def param_report(fused: FusedDetector, bank: FusionBank) -> dict:
    """Parameter accounting of one fused detector with ``bank`` plugged in."""
    fusion = sum(param_count(m).total for m in bank.modules)
    formula = None
    if bank.kind == "cbam":
        formula = sum(fusion_param_formula(m.cfeat, m.channel_attn.reduction) for m in bank.modules)
    head = fused.head_for(bank)
    parts = [fused.rgb, fused.x, head] + list(bank.modules)
    trainable = sum(param_count(m).trainable for m in parts)
    total = sum(param_count(m).total for m in parts)
    return {"fusion": fusion, "formula": formula, "trainable": trainable, "total": total,
            "trainable_fraction": trainable / total}


# ---------------------------------------------------------------- full run


class Experiment:
    """Owns the dataset, cached features and trained parts of one run."""

    def __init__(self, config: RunConfig, out: Path, echo: Callable[[str], None] = lambda s: None):
        self.config = config
        self.out = Path(out)
        self.echo = echo
        self.dataset: Optional[Dataset] = None
        self.rgb: Optional[SingleDetector] = None
        self.x: Optional[SingleDetector] = None
        self.train_feats: Optional[FeatureSet] = None
        self.test_feats: Optional[FeatureSet] = None
        self.system: Optional[TrainedSystem] = None

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "seed": self.config.seed}

    def prepare_data(self) -> Dataset:
        data_dir = self.out / "data"
        if (data_dir / "annotations.json").exists():
            self.dataset = load_dataset(data_dir)
        else:
            self.dataset = generate_dataset(self.config.split_spec(), data_dir)
        self.echo(f"dataset: {len(self.dataset.samples)} samples")
        return self.dataset

    def train_branches(self) -> None:
        cfg = self.config
        train = self.dataset.get(self.dataset.ids("train"))
        for modality, ch in (("rgb", 3), ("x", 1)):
            seed = cfg.seed + (1 if modality == "rgb" else 2)
            det = SingleDetector(ch, cfg.detector_config(), np.random.default_rng(seed), modality)
            det.assign_names()
            tlog = train_detector(det, train, cfg.detector_epochs, cfg.lr, cfg.batch_size, seed,
                                  progress=lambda e, l, m=modality: self.echo(f"{m} detector epoch {e} loss {l:.5f}"))
            store.save_detector(self.out / f"{modality}_detector.rxf", det, self.meta())
            (self.out / f"{modality}_detector.log").write_text(tlog.to_text())
            setattr(self, modality, det)

    def build_features(self) -> None:
        ds = self.dataset
        self.train_feats = build_features(self.rgb, self.x, ds.get(ds.ids("train")))
        self.test_feats = build_features(self.rgb, self.x, ds.get(ds.ids("test")))

    def new_system(self) -> TrainedSystem:
        cfg = self.config
        template = FusionBank("template", cfg.cfeat, np.random.default_rng(cfg.seed), cfg.module)
        fused = FusedDetector(self.rgb, self.x, template, cfg.head)
        clf = SceneClassifier(cfg.taxonomy, self.train_feats.deep.shape[1], np.random.default_rng(cfg.seed + 3))
        return TrainedSystem(fused, clf)

    def train_classifier(self) -> None:
        cfg = self.config
        tlog = train_classifier(self.system.classifier, self.train_feats, cfg.classifier_epochs, cfg.lr,
                                cfg.batch_size, cfg.seed + 3)
        store.save_classifier(self.out / "classifier.rxf", self.system.classifier, self.meta())
        (self.out / "classifier.log").write_text(tlog.to_text())

    def train_banks(self, system: TrainedSystem, fraction: float, tag: str = "") -> None:
        cfg = self.config
        scenes = [AGNOSTIC] + list(system.taxonomy)
        for i, scene in enumerate(scenes):
            bank = train_fusion(system, scene, self.train_feats, cfg.fusion_epochs, cfg.lr, fraction,
                                seed=cfg.seed + 10 + i, kind=cfg.module)
            meta = dict(self.meta(), fraction=fraction, train_size=bank.train_size,
                        params=param_report(system.fused, bank))
            store.save_bank(self.out / f"fusion_{scene}{tag}.rxf", bank, system.fused, meta)
            (self.out / f"fusion_{scene}{tag}.log").write_text(bank.train_log.to_text())
            self.echo(f"fusion bank {scene}{tag}: final loss {bank.train_log.losses[-1]:.5f}")
            if scene == AGNOSTIC:
                system.agnostic = bank
            else:
                system.banks[scene] = bank

    def run(self) -> dict:
        t0 = time.time()
        self.out.mkdir(parents=True, exist_ok=True)
        self.prepare_data()
        self.train_branches()
        self.build_features()
        self.system = self.new_system()
        self.train_classifier()
        self.train_banks(self.system, self.config.fraction)
        store.save_system(self.out / "system.rxf", self.system, self.meta())
        records = evaluate_system(self.system, self.test_feats)
        doc = metrics_document(records, {"config": self.config.to_dict()})
        (self.out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        (self.out / "metrics.txt").write_text(metrics_table(records))
        self.echo(f"pipeline finished in {time.time() - t0:.1f}s")
        return doc

    def fraction_ablation(self, fractions: Sequence[float] = (100.0, 50.0, 25.0)) -> Dict[float, float]:
        """Scene-adaptive mAP@0.5 with every bank trained on a fraction of the split."""
        out = {}
        for f in fractions:
            if f == self.config.fraction and self.system is not None:
                system = self.system
            else:
                system = TrainedSystem(self.system.fused, self.system.classifier)
                self.train_banks(system, f, tag=f"_f{int(f)}")
            recs = evaluate_system(system, self.test_feats, ("scene-adaptive",))
            out[f] = lookup(recs, "scene-adaptive")
        return out

    def exclusion(self, scene: str) -> Tuple[Optional[float], Optional[float]]:
        """(excluded-scene mAP@0.5, full-test mAP@0.5) of a system trained without ``scene``."""
        cfg = self.config
        sub = train_excluding(self.system, scene, self.train_feats, cfg.fusion_epochs, cfg.classifier_epochs,
                              cfg.lr, seed=cfg.seed + 20)
        recs = evaluate_system(sub, self.test_feats, ("scene-adaptive",))
        return lookup(recs, "scene-adaptive", scene=scene), lookup(recs, "scene-adaptive")
