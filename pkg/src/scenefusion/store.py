"""Saving and restoring models through the RXF1 container."""

from __future__ import annotations

import copy
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from . import checkpoint
from .detector import DetectorConfig, DetectorHead, FusedDetector, SingleDetector
from .fusion import FusionBank
from .scene import SceneClassifier, TrainedSystem

PathLike = Union[str, Path]


def _prefixed(prefix: str, state: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in state.items()}


def _strip(prefix: str, tensors: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def save_detector(path: PathLike, det: SingleDetector, meta: dict | None = None) -> None:
    info = {"kind": "detector", "modality": det.modality, "detector_config": asdict(det.config)}
    info.update(meta or {})
    checkpoint.save(path, det.state_dict(), info)


def detector_from(tensors: Mapping[str, np.ndarray], info: dict) -> SingleDetector:
    config = DetectorConfig(**info["detector_config"])
    in_ch = 3 if info["modality"] == "rgb" else 1
    det = SingleDetector(in_ch, config, np.random.default_rng(0), info["modality"])
    det.load_state_dict(tensors)
    return det


def load_detector(path: PathLike) -> Tuple[SingleDetector, dict]:
    tensors, info = checkpoint.load(path)
    if info.get("kind") != "detector":
        raise checkpoint.CheckpointError(f"{path}: not a detector checkpoint (kind={info.get('kind')!r})")
    return detector_from(tensors, info), info


def bank_tensors(bank: FusionBank, head: DetectorHead) -> Dict[str, np.ndarray]:
    tensors = _prefixed("fusion.", {k: v for k, v in bank.state_dict().items() if not k.startswith("head.")})
    tensors.update(_prefixed("head.", head.state_dict()))
    return tensors


def save_bank(path: PathLike, bank: FusionBank, fused: FusedDetector, meta: dict | None = None) -> None:
    info = {"kind": "fusion", "scene": bank.scene, "module": bank.kind, "head_mode": fused.head_mode,
            "cfeat": fused.config.cfeat}
    info.update(meta or {})
    checkpoint.save(path, bank_tensors(bank, fused.head_for(bank)), info)


def bank_from(tensors: Mapping[str, np.ndarray], info: dict, fused: FusedDetector | None = None) -> Tuple[FusionBank, Dict[str, np.ndarray]]:
    bank = FusionBank(info["scene"], int(info["cfeat"]), np.random.default_rng(0), info["module"])
    bank.load_state_dict(_strip("fusion.", tensors))
    head_state = _strip("head.", tensors)
    if info["head_mode"] == "tr" and fused is not None:
        bank.head = copy.deepcopy(fused.head)
        bank.head.load_state_dict(head_state)
        bank.head.freeze(False)
    return bank, head_state


def load_bank(path: PathLike, fused: FusedDetector | None = None) -> Tuple[FusionBank, dict, Dict[str, np.ndarray]]:
    tensors, info = checkpoint.load(path)
    if info.get("kind") != "fusion":
        raise checkpoint.CheckpointError(f"{path}: not a fusion checkpoint (kind={info.get('kind')!r})")
    bank, head = bank_from(tensors, info, fused)
    return bank, info, head


def save_classifier(path: PathLike, clf: SceneClassifier, meta: dict | None = None) -> None:
    info = {"kind": "classifier", "taxonomy": clf.taxonomy, "in_features": int(clf.fc.weight.shape[1])}
    info.update(meta or {})
    checkpoint.save(path, clf.state_dict(), info)


def load_classifier(path: PathLike) -> Tuple[SceneClassifier, dict]:
    tensors, info = checkpoint.load(path)
    if info.get("kind") != "classifier":
        raise checkpoint.CheckpointError(f"{path}: not a classifier checkpoint (kind={info.get('kind')!r})")
    clf = SceneClassifier(info["taxonomy"], int(info["in_features"]), np.random.default_rng(0))
    clf.load_state_dict(tensors)
    return clf, info


def save_system(path: PathLike, system: TrainedSystem, meta: dict | None = None) -> None:
    """Everything needed for scene-adaptive inference in one container."""
    fused = system.fused
    tensors = _prefixed("rgb.", fused.rgb.state_dict())
    tensors.update(_prefixed("x.", fused.x.state_dict()))
    tensors.update(_prefixed("head.", fused.head.state_dict()))
    tensors.update(_prefixed("classifier.", system.classifier.state_dict()))
    banks = dict(system.banks)
    if system.agnostic is not None:
        banks["__agnostic__"] = system.agnostic
    for name, bank in banks.items():
        tensors.update(_prefixed(f"bank.{name}.", bank.state_dict()))
    info = {
        "kind": "system",
        "detector_config": asdict(fused.config),
        "head_mode": fused.head_mode,
        "module": fused.bank.kind,
        "taxonomy": system.taxonomy,
        "banks": {name: b.scene for name, b in banks.items()},
        "in_features": int(system.classifier.fc.weight.shape[1]),
    }
    info.update(meta or {})
    checkpoint.save(path, tensors, info)


def load_system(path: PathLike) -> Tuple[TrainedSystem, dict]:
    tensors, info = checkpoint.load(path)
    if info.get("kind") != "system":
        raise checkpoint.CheckpointError(f"{path}: not a system checkpoint (kind={info.get('kind')!r})")
    rgb = detector_from(_strip("rgb.", tensors), {"modality": "rgb", "detector_config": info["detector_config"]})
    x = detector_from(_strip("x.", tensors), {"modality": "x", "detector_config": info["detector_config"]})
    cfeat = rgb.config.cfeat
    template = FusionBank("template", cfeat, np.random.default_rng(0), info["module"])
    fused = FusedDetector(rgb, x, template, info["head_mode"])
    fused.head.load_state_dict(_strip("head.", tensors))
    clf = SceneClassifier(info["taxonomy"], int(info["in_features"]), np.random.default_rng(0))
    clf.load_state_dict(_strip("classifier.", tensors))
    system = TrainedSystem(fused, clf)
    for name, scene in info["banks"].items():
        bank = FusionBank(scene, cfeat, np.random.default_rng(0), info["module"])
        state = _strip(f"bank.{name}.", tensors)
        if any(k.startswith("head.") for k in state):
            bank.head = copy.deepcopy(fused.head)
            bank.head.freeze(False)
        bank.load_state_dict(state)
        if name == "__agnostic__":
            system.agnostic = bank
        else:
            system.banks[name] = bank
    return system, info
