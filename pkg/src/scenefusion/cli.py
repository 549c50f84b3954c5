"""Command-line workflow: data, training, evaluation, inference and plot data.

Every failure is reported on stderr as one line ``E<nnn> message`` and the
process exits nonzero. Results go to files; progress lines go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint, store
from .data import DatasetFormatError, SplitSpec, generate_dataset, load_dataset
from .detector import FREEZE_MODES, Detection, DetectorConfig, FusedDetector, SingleDetector
from .fusion import FusionBank, cam_heatmap, export_channel_attention, write_heatmap
from .metrics import ImageDetections, ImageTruth
from .pipeline import (
    Experiment,
    RunConfig,
    detection_records,
    evaluate_system,
    metrics_document,
    metrics_table,
    param_report,
)
from .scene import AGNOSTIC, SceneClassifier, TrainedSystem, detect_scene_adaptive, train_classifier, train_fusion
from .tensor import Tensor, no_grad
from .training import FeatureSet, build_features, pyramid_cache, train_detector

log = logging.getLogger("scenefusion")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


E_USAGE = 1
E_IO = 10
E_MISSING = 11
E_CHECKPOINT = 20
E_DATASET = 30
E_TAXONOMY = 40
E_VALUE = 50
E_NUMERIC = 60
E_INTERNAL = 99


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # keep the stable prefix for usage errors too
        self.print_usage(sys.stderr)
        sys.stderr.write(f"E{E_USAGE:03d} {self.prog}: {message}\n")
        sys.exit(2)


def _setup_logging(timestamps: bool, quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    fmt = "%(asctime)s %(message)s" if timestamps else "%(message)s"
    handler.setFormatter(logging.Formatter(fmt, "%Y-%m-%dT%H:%M:%S"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise CliError(E_IO, f"cannot write {path}: {e}") from e


def _log_path(out: Path) -> Path:
    return out.with_suffix(".log")


def _load_data(path: str):
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise CliError(E_MISSING, str(e)) from e
    except DatasetFormatError as e:
        raise CliError(E_DATASET, str(e)) from e


def _require_file(path: Optional[str], what: str) -> Path:
    if not path:
        raise CliError(E_MISSING, f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise CliError(E_MISSING, f"{what} not found: {p}")
    return p


def _scene_list(text: str) -> List[str]:
    out = [s.strip() for s in text.split(",") if s.strip()]
    if not out:
        raise CliError(E_VALUE, "empty scene list")
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> None:
    try:
        counts = tuple(int(v) for v in args.per_scene_counts.split(","))
    except ValueError:
        raise CliError(E_VALUE, f"--per-scene-counts must be three integers, got {args.per_scene_counts!r}")
    if len(counts) != 3 or min(counts) < 0:
        raise CliError(E_VALUE, f"--per-scene-counts needs train,val,test >= 0, got {args.per_scene_counts!r}")
    scenes = _scene_list(args.scenes)
    spec = SplitSpec({s: counts for s in scenes}, args.seed, args.image_size)
    try:
        ds = generate_dataset(spec, args.out)
    except OSError as e:
        raise CliError(E_IO, f"cannot write dataset to {args.out}: {e}") from e
    log.info("wrote %d samples to %s", len(ds.samples), args.out)


def cmd_train_detector(args) -> None:
    ds = _load_data(args.data)
    samples = ds.get(ds.ids("train"))
    if not samples:
        raise CliError(E_DATASET, "training split is empty")
    config = DetectorConfig(image_size=ds.image_size, cfeat=args.cfeat)
    seed = args.seed + (1 if args.modality == "rgb" else 2)
    det = SingleDetector(3 if args.modality == "rgb" else 1, config, np.random.default_rng(seed), args.modality)
    det.assign_names()
    tlog = train_detector(det, samples, args.epochs, args.lr, args.batch_size, seed,
                          progress=lambda e, l: log.info("%s epoch %d loss %.6f", args.modality, e, l))
    out = Path(args.out)
    meta = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "batch_size": args.batch_size}
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        store.save_detector(out, det, meta)
    except OSError as e:
        raise CliError(E_IO, f"cannot write {out}: {e}") from e
    _write_text(_log_path(out), tlog.to_text())
    log.info("saved %s", out)


def _load_detector(path: Optional[str], what: str) -> SingleDetector:
    p = _require_file(path, what)
    det, _ = store.load_detector(p)
    return det


def _fused(rgb_path: Optional[str], x_path: Optional[str], head: str, module: str) -> FusedDetector:
    rgb = _load_detector(rgb_path, "--rgb-ckpt")
    x = _load_detector(x_path, "--x-ckpt")
    if rgb.modality != "rgb" or x.modality != "x":
        raise CliError(E_CHECKPOINT, f"expected rgb and x checkpoints, got {rgb.modality} and {x.modality}")
    if asdict(rgb.config) != asdict(x.config):
        raise CliError(E_CHECKPOINT, "rgb and x checkpoints were trained with different detector configs")
    template = FusionBank("template", rgb.config.cfeat, np.random.default_rng(0), module)
    return FusedDetector(rgb, x, template, head)


def cmd_train_fusion(args) -> None:
    fused = _fused(args.rgb_ckpt, args.x_ckpt, args.head, args.module)
    ds = _load_data(args.data)
    scenes = ds.scenes if args.scene == AGNOSTIC else [args.scene]
    if args.scene != AGNOSTIC and args.scene not in ds.scenes:
        raise CliError(E_TAXONOMY, f"scene {args.scene!r} not in dataset scenes {ds.scenes}")
    if not 0 < args.fraction <= 100:
        raise CliError(E_VALUE, f"--fraction must be in (0, 100], got {args.fraction}")
    feats = build_features(fused.rgb, fused.x, ds.get(ds.ids("train", scenes)))
    system = TrainedSystem(fused, SceneClassifier(ds.scenes, feats.deep.shape[1], np.random.default_rng(0)))
    bank = train_fusion(system, args.scene, feats, args.epochs, args.lr, args.fraction, args.seed, args.module)
    report = param_report(fused, bank)
    log.info("params: fusion=%d formula=%s trainable=%d total=%d trainable_fraction=%.5f train_samples=%d",
             report["fusion"], report["formula"], report["trainable"], report["total"],
             report["trainable_fraction"], bank.train_size)
    out = Path(args.out)
    meta = {"seed": args.seed, "epochs": args.epochs, "lr": args.lr, "fraction": args.fraction,
            "train_size": bank.train_size, "params": report,
            "taxonomy": ds.scenes}
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        store.save_bank(out, bank, fused, meta)
    except OSError as e:
        raise CliError(E_IO, f"cannot write {out}: {e}") from e
    _write_text(_log_path(out), bank.train_log.to_text())
    log.info("saved %s", out)


def cmd_train_classifier(args) -> None:
    rgb = _load_detector(args.rgb_ckpt, "--rgb-ckpt")
    ds = _load_data(args.data)
    taxonomy = _scene_list(args.taxonomy) if args.taxonomy else list(ds.scenes)
    unknown = [s for s in taxonomy if s not in ds.scenes]
    if unknown:
        raise CliError(E_TAXONOMY, f"taxonomy scenes {unknown} not present in dataset {ds.scenes}")
    samples = ds.get(ds.ids("train", taxonomy))
    _, deep = pyramid_cache(rgb, samples, with_deep=True)
    feats = FeatureSet([s.id for s in samples], [], [], deep, [], [s.scene for s in samples])
    clf = SceneClassifier(taxonomy, deep.shape[1], np.random.default_rng(args.seed + 3))
    tlog = train_classifier(clf, feats, args.epochs, args.lr, args.batch_size, args.seed + 3)
    out = Path(args.out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        store.save_classifier(out, clf, {"seed": args.seed, "epochs": args.epochs})
    except OSError as e:
        raise CliError(E_IO, f"cannot write {out}: {e}") from e
    _write_text(_log_path(out), tlog.to_text())
    log.info("saved %s (final loss %.6f)", out, tlog.losses[-1])


def _system(args) -> TrainedSystem:
    """Assemble a system from ``--system`` or from the individual checkpoints."""
    if getattr(args, "system", None):
        system, _ = store.load_system(_require_file(args.system, "--system"))
        return system
    bank_paths = list(args.bank or [])
    if not bank_paths:
        raise CliError(E_MISSING, "missing --bank checkpoints (or --system)")
    loaded = []
    for p in bank_paths:
        tensors, info = checkpoint.load(_require_file(p, "--bank"))
        if info.get("kind") != "fusion":
            raise CliError(E_CHECKPOINT, f"{p}: not a fusion checkpoint")
        loaded.append((tensors, info))
    modes = {info["head_mode"] for _, info in loaded}
    kinds = {info["module"] for _, info in loaded}
    if len(modes) != 1 or len(kinds) != 1:
        raise CliError(E_CHECKPOINT, f"banks disagree on head mode {sorted(modes)} or module {sorted(kinds)}")
    fused = _fused(args.rgb_ckpt, args.x_ckpt, modes.pop(), kinds.pop())
    clf, _ = store.load_classifier(_require_file(args.classifier, "--classifier"))
    system = TrainedSystem(fused, clf)
    for tensors, info in loaded:
        bank, head_state = store.bank_from(tensors, info, fused)
        if info["head_mode"] != "tr":
            for k, v in fused.head.state_dict().items():
                if not np.array_equal(head_state[k], v):
                    raise CliError(E_CHECKPOINT, f"bank {bank.scene!r} was trained against a different frozen head")
        if bank.scene == AGNOSTIC:
            system.agnostic = bank
        else:
            system.banks[bank.scene] = bank
    missing = [s for s in clf.taxonomy if s not in system.banks]
    if missing:
        raise CliError(E_TAXONOMY, f"classifier taxonomy {clf.taxonomy} has no bank for {missing}")
    return system


def _detections_file(path: Path, ids: Sequence[int]) -> List[ImageDetections]:
    """COCO-style result list: ``[{image_id, category_id, bbox [x,y,w,h], score}]``."""
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise CliError(E_IO, f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CliError(E_VALUE, f"{path}: invalid JSON: {e}") from e
    rows = doc.get("detections", []) if isinstance(doc, dict) else doc
    per: Dict[int, list] = {i: [] for i in ids}
    for k, r in enumerate(rows):
        try:
            iid, cat, (x, y, w, h), score = int(r["image_id"]), int(r["category_id"]), r["bbox"], float(r["score"])
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(E_VALUE, f"{path}: detection {k} malformed: {e}") from e
        if iid in per:
            per[iid].append(([x, y, x + w, y + h], score, cat))
    out = []
    for i in ids:
        rows_i = per[i]
        out.append(ImageDetections(np.array([b for b, _, _ in rows_i], dtype=np.float64).reshape(-1, 4),
                                   np.array([s for _, s, _ in rows_i], dtype=np.float64),
                                   np.array([c for _, _, c in rows_i], dtype=np.int64)))
    return out


def _write_metrics(out: Path, records: List[dict], extra: dict) -> None:
    doc = metrics_document(records, extra)
    _write_text(out / "metrics.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _write_text(out / "metrics.txt", metrics_table(records))


def cmd_eval(args) -> None:
    ds = _load_data(args.data)
    ids = ds.ids(args.split)
    samples = ds.get(ids)
    gts = [ImageTruth(s.boxes, s.classes) for s in samples]
    scenes = [s.scene for s in samples]
    out = Path(args.out)
    if args.detections:
        dets = _detections_file(_require_file(args.detections, "--detections"), ids)
        as_lists = [[Detection(int(c), float(s), tuple(b)) for b, s, c in zip(d.boxes, d.scores, d.classes)]
                    for d in dets]
        records = detection_records("detections", as_lists, gts, scenes, ds.scenes, ds.image_size)
        _write_metrics(out, records, {"split": args.split})
    else:
        system = _system(args)
        feats = build_features(system.fused.rgb, system.fused.x, samples)
        records = evaluate_system(system, feats)
        _write_metrics(out, records, {"split": args.split})
    sys.stdout.write(metrics_table(records))


def cmd_infer(args) -> None:
    system = _system(args)
    ds = _load_data(args.data)
    if args.id not in ds.samples:
        raise CliError(E_VALUE, f"image id {args.id} not in dataset")
    s = ds.samples[args.id]
    dets, scene = detect_scene_adaptive(s.rgb, s.x, system)
    doc = {"image_id": s.id, "scene": scene, "true_scene": s.scene, "detections": [d.to_json() for d in dets]}
    text = json.dumps(doc, sort_keys=True) + "\n"
    if args.out:
        _write_text(Path(args.out), text)
    sys.stdout.write(text)


def cmd_viz(args) -> None:
    system = _system(args)
    ds = _load_data(args.data)
    scene = args.scene
    bank = system.agnostic if scene == AGNOSTIC else system.banks.get(scene)
    if bank is None:
        raise CliError(E_TAXONOMY, f"no fusion bank for scene {scene!r}")
    ids = ds.ids(args.split, None if scene == AGNOSTIC else [scene])[: args.samples]
    if not ids:
        raise CliError(E_DATASET, f"no {args.split} samples for scene {scene!r}")
    if not 0 <= args.level < len(bank.modules):
        raise CliError(E_VALUE, f"--level must be in [0, {len(bank.modules) - 1}]")
    out = Path(args.out)
    samples = ds.get(ids)
    feats = build_features(system.fused.rgb, system.fused.x, samples)
    pairs = [([Tensor(a[i:i + 1]) for a in feats.rgb], [Tensor(a[i:i + 1]) for a in feats.x]) for i in range(len(ids))]
    profile = export_channel_attention(bank, pairs, args.level)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError(E_IO, f"cannot create {out}: {e}") from e
    profile.write(out / f"channel_profile_{scene}_L{args.level}.txt")
    with no_grad():
        for (pr, px), sid in zip(pairs[: args.cam_samples], ids):
            fused = system.fused.fuse(pr, px, bank)
            for name, act in (("rgb", pr[args.level]), ("x", px[args.level]), ("fused", fused[args.level])):
                write_heatmap(out / f"cam_{sid:06d}_{name}_L{args.level}.txt", cam_heatmap(act), args.level, scene)
    log.info("wrote plot data to %s", out)


def cmd_run_all(args) -> None:
    config = RunConfig(
        image_size=args.image_size, cfeat=args.cfeat, taxonomy=_scene_list(args.scenes),
        counts=tuple(int(v) for v in args.per_scene_counts.split(",")), lr=args.lr,
        detector_epochs=args.detector_epochs, fusion_epochs=args.fusion_epochs,
        classifier_epochs=args.classifier_epochs, batch_size=args.batch_size, seed=args.seed,
        head=args.head, module=args.module, fraction=args.fraction)
    if len(config.counts) != 3:
        raise CliError(E_VALUE, "--per-scene-counts needs train,val,test")
    exp = Experiment(config, Path(args.out), echo=log.info)
    try:
        doc = exp.run()
    except OSError as e:
        raise CliError(E_IO, str(e)) from e
    sys.stdout.write(metrics_table(doc["records"]))


# ---------------------------------------------------------------- parser


def _system_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--system", help="system checkpoint from run-all (replaces the four options below)")
    p.add_argument("--rgb-ckpt")
    p.add_argument("--x-ckpt")
    p.add_argument("--classifier")
    p.add_argument("--bank", action="append", help="fusion bank checkpoint; repeat per scene")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenefusion", description=__doc__.splitlines()[0])
    parser.add_argument("--no-timestamps", action="store_true", help="omit the time prefix on log lines")
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic two-modality dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-scene-counts", default="200,50,50", help="train,val,test images per scene")
    p.add_argument("--scenes", default="day,night,fog")
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-detector", help="train one single-modality detector")
    p.add_argument("--modality", choices=("rgb", "x"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--cfeat", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-fusion", help="train a fusion bank on frozen branches")
    p.add_argument("--rgb-ckpt", required=True)
    p.add_argument("--x-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True, help="scene name or 'agnostic'")
    p.add_argument("--fraction", type=float, default=100.0, help="percent of the training split")
    p.add_argument("--head", choices=FREEZE_MODES, default="th")
    p.add_argument("--module", choices=("cbam", "eca"), default="cbam")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("train-classifier", help="train the scene classifier on the RGB branch")
    p.add_argument("--rgb-ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--taxonomy", help="comma-separated scenes (default: dataset scenes)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("eval", help="metrics JSON and table for a split")
    _system_args(p)
    p.add_argument("--detections", help="COCO-style detections file to score instead of a model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="scene-adaptive detection for one sample")
    _system_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--id", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("viz", help="channel-attention profiles and CAM heatmaps as plot data")
    _system_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--samples", type=int, default=50, help="images averaged into the channel profile")
    p.add_argument("--cam-samples", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("run-all", help="data, all training, and evaluation in one go")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-scene-counts", default="200,50,50")
    p.add_argument("--scenes", default="day,night,fog")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--cfeat", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--detector-epochs", type=int, default=RunConfig.detector_epochs)
    p.add_argument("--fusion-epochs", type=int, default=RunConfig.fusion_epochs)
    p.add_argument("--classifier-epochs", type=int, default=RunConfig.classifier_epochs)
    p.add_argument("--head", choices=FREEZE_MODES, default=RunConfig.head)
    p.add_argument("--module", choices=("cbam", "eca"), default="cbam")
    p.add_argument("--fraction", type=float, default=100.0)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(not args.no_timestamps, args.quiet)
    try:
        args.func(args)
    except CliError as e:
        sys.stderr.write(f"E{e.code:03d} {e}\n")
        return 1
    except checkpoint.CheckpointError as e:
        sys.stderr.write(f"E{E_CHECKPOINT:03d} {e}\n")
        return 1
    except DatasetFormatError as e:
        sys.stderr.write(f"E{E_DATASET:03d} {e}\n")
        return 1
    except FileNotFoundError as e:
        sys.stderr.write(f"E{E_MISSING:03d} {e}\n")
        return 1
    except OSError as e:
        sys.stderr.write(f"E{E_IO:03d} {e}\n")
        return 1
    except FloatingPointError as e:
        sys.stderr.write(f"E{E_NUMERIC:03d} {e}\n")
        return 1
    except (ValueError, KeyError) as e:
        sys.stderr.write(f"E{E_VALUE:03d} {e}\n")
        return 1
    except Exception as e:  # pragma: no cover - last resort, still one line
        sys.stderr.write(f"E{E_INTERNAL:03d} {type(e).__name__}: {e}\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
