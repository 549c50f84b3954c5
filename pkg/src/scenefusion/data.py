"""Seeded synthetic RGB-X benchmark with scene-dependent modality degradation.

Objects are rectangles (class 0) or ellipses (class 1). Class 0 is red in RGB
and hot in X; class 1 is blue in RGB and warm in X. Scenes degrade the two
modalities differently:

* ``day``   clean RGB, low-contrast noisy X
* ``night`` RGB darkened to 15 % contrast plus noise, clean X
* ``fog``   RGB pulled up to 70 % toward gray (more at the top of the frame), mildly blurred X
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, zoom

from . import checkpoint

DEFAULT_SCENES = ("day", "night", "fog")
SPLITS = ("train", "val", "test")
CLASS_NAMES = ("box", "disc")
MIN_OBJ, MAX_OBJ = 24, 40
NIGHT_DECOYS = (1, 3)
DAY_DECOYS = (1, 3)


@dataclass
class SceneSample:
    id: int
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    x: np.ndarray  # [1, H, W] in [0, 1]
    scene: str
    boxes: np.ndarray  # [M, 4] corners (x_min, y_min, x_max, y_max)
    classes: np.ndarray  # [M]
    seed: int = 0


@dataclass
class SplitSpec:
    counts: Dict[str, Tuple[int, int, int]]
    seed: int = 42
    image_size: int = 128

    @classmethod
    def uniform(cls, train: int, val: int, test: int, scenes: Sequence[str] = DEFAULT_SCENES, seed: int = 42,
                image_size: int = 128) -> "SplitSpec":
        return cls({s: (train, val, test) for s in scenes}, seed, image_size)

    @property
    def scenes(self) -> List[str]:
        return list(self.counts)


@dataclass
class Dataset:
    samples: Dict[int, SceneSample]
    splits: Dict[str, Dict[str, List[int]]]  # scene -> split -> ids
    scenes: List[str]
    image_size: int

    def ids(self, split: str, scenes: Sequence[str] | None = None) -> List[int]:
        scenes = self.scenes if scenes is None else scenes
        out: List[int] = []
        for s in scenes:
            out.extend(self.splits[s][split])
        return out

    def get(self, ids: Sequence[int]) -> List[SceneSample]:
        return [self.samples[i] for i in ids]


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, sample_id])


# ---------------------------------------------------------------- rendering


def _texture(rng: np.random.Generator, size: int, cells: int, amp: float) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    tex = zoom(coarse, size / cells, order=1, mode="nearest")[:size, :size]
    return amp * tex / max(tex.std(), 1e-9)


def object_size_range(size: int) -> Tuple[int, int]:
    """Object side range in pixels, scaled from the 128 px reference."""
    return max(2, round(MIN_OBJ * size / 128)), max(3, round(MAX_OBJ * size / 128))


def _place_objects(rng: np.random.Generator, size: int, n: int | None = None,
                   avoid: np.ndarray | None = None) -> Tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(1, 6)) if n is None else n
    taken = [tuple(b) for b in (avoid if avoid is not None else [])]
    boxes: List[Tuple[int, int, int, int]] = []
    classes: List[int] = []
    lo, hi = object_size_range(size)
    for _ in range(200):
        if len(boxes) == n:
            break
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        cand = (x0, y0, x0 + w, y0 + h)
        if any(_overlap(cand, b) > 0.1 for b in boxes + taken):
            continue
        boxes.append(cand)
        classes.append(int(rng.integers(0, 2)))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64)


def _overlap(a, b) -> float:
    iw = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))


def _mask(box: np.ndarray, cls: int, size: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if cls == 0:
        return ((xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)).astype(np.float64)
    cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
    return (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0).astype(np.float64)


RGB_COLORS = {0: np.array([0.92, 0.18, 0.15]), 1: np.array([0.15, 0.30, 0.95])}
X_LEVELS = {0: 0.95, 1: 0.70}


def render_clean(rng: np.random.Generator, size: int, boxes: np.ndarray, classes: np.ndarray,
                 decoys: Tuple[np.ndarray, np.ndarray] | None = None,
                 x_decoys: Tuple[np.ndarray, np.ndarray] | None = None) -> Tuple[np.ndarray, np.ndarray]:
    """Draw objects into both modalities; ``decoys`` go into RGB only, ``x_decoys`` into X only."""
    base = np.array([0.45, 0.55, 0.40]) + rng.uniform(-0.08, 0.08, size=3)
    rgb = np.empty((3, size, size))
    shared = _texture(rng, size, 8, 0.12)
    for c in range(3):
        rgb[c] = base[c] + shared + _texture(rng, size, 16, 0.05)
    x = 0.30 + _texture(rng, size, 8, 0.04)
    for box, cls in zip(boxes, classes):
        m = _mask(box, int(cls), size)
        color = RGB_COLORS[int(cls)] + rng.uniform(-0.05, 0.05, size=3)
        for c in range(3):
            rgb[c] = rgb[c] * (1 - m) + color[c] * m
        level = X_LEVELS[int(cls)] + rng.uniform(-0.03, 0.03)
        x = x * (1 - m) + level * m
    if decoys is not None:
        for box, cls in zip(*decoys):
            m = _mask(box, int(cls), size)
            color = RGB_COLORS[int(cls)] + rng.uniform(-0.05, 0.05, size=3)
            for c in range(3):
                rgb[c] = rgb[c] * (1 - m) + color[c] * m
    if x_decoys is not None:
        for box, cls in zip(*x_decoys):
            m = _mask(box, int(cls), size)
            x = x * (1 - m) + (X_LEVELS[int(cls)] + rng.uniform(-0.03, 0.03)) * m
    return rgb, x[None]


def degrade(scene: str, rgb: np.ndarray, x: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    size = rgb.shape[-1]
    if scene == "day":
        rgb = rgb + rng.normal(0, 0.02, rgb.shape)
        x = 0.5 + 0.5 * (x - 0.5) + rng.normal(0, 0.18, x.shape)
    elif scene == "night":
        rgb = 0.15 * rgb + rng.normal(0, 0.1, rgb.shape)
        x = x + rng.normal(0, 0.02, x.shape)
    elif scene == "fog":
        rows = (np.arange(size) + 0.5) / size
        alpha = (0.7 * (1.0 - 0.2 * rows))[None, :, None]
        gray = 0.75
        rgb = (1 - alpha) * rgb + alpha * gray + rng.normal(0, 0.02, rgb.shape)
        x = gaussian_filter(x, sigma=(0, 1.0, 1.0)) + rng.normal(0, 0.03, x.shape)
    else:
        raise ValueError(f"unknown scene {scene!r}")
    return rgb, x


def generate_sample(scene: str, rng: np.random.Generator, sample_id: int = 0, size: int = 128,
                    seed: int = 0) -> SceneSample:
    if scene not in ("day", "night", "fog"):
        raise ValueError(f"unknown scene {scene!r}")
    boxes, classes = _place_objects(rng, size)
    decoys = None
    if scene == "night":
        # lamps and reflections: object-like in RGB, no thermal signature
        decoys = _place_objects(rng, size, int(rng.integers(NIGHT_DECOYS[0], NIGHT_DECOYS[1] + 1)), boxes)
    x_decoys = None
    if scene == "day":
        # sun-heated surfaces: object-like in X, invisible in RGB
        x_decoys = _place_objects(rng, size, int(rng.integers(DAY_DECOYS[0], DAY_DECOYS[1] + 1)), boxes)
    rgb, x = render_clean(rng, size, boxes, classes, decoys, x_decoys)
    rgb, x = degrade(scene, rgb, x, rng)
    # float32-representable so the container round-trip is exact
    rgb = np.clip(rgb, 0, 1).astype(np.float32).astype(np.float64)
    x = np.clip(x, 0, 1).astype(np.float32).astype(np.float64)
    return SceneSample(sample_id, rgb, x, scene, boxes, classes, seed)


def iter_spec(spec: SplitSpec):
    """Yield (id, scene, split) in the canonical id order."""
    next_id = 0
    for scene in spec.scenes:
        for split, n in zip(SPLITS, spec.counts[scene]):
            for _ in range(n):
                yield next_id, scene, split
                next_id += 1


def generate_in_memory(spec: SplitSpec) -> Dataset:
    samples: Dict[int, SceneSample] = {}
    splits: Dict[str, Dict[str, List[int]]] = {s: {k: [] for k in SPLITS} for s in spec.scenes}
    for sid, scene, split in iter_spec(spec):
        samples[sid] = generate_sample(scene, sample_rng(spec.seed, sid), sid, spec.image_size, spec.seed)
        splits[scene][split].append(sid)
    return Dataset(samples, splits, spec.scenes, spec.image_size)


# ---------------------------------------------------------------- persistence


def save_dataset(ds: Dataset, out: Union[str, Path], seed: int = 0) -> None:
    out = Path(out)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    images, annotations = [], []
    for sid in sorted(ds.samples):
        s = ds.samples[sid]
        rel = f"images/{sid:06d}.rxf"
        checkpoint.save(out / rel, {"rgb": s.rgb.astype(np.float32), "x": s.x.astype(np.float32)},
                        {"id": sid, "scene": s.scene, "seed": s.seed})
        images.append({"id": sid, "file": rel, "width": ds.image_size, "height": ds.image_size, "scene": s.scene})
        for b, c in zip(s.boxes, s.classes):
            annotations.append({"image_id": sid, "category_id": int(c),
                                "bbox": [float(b[0]), float(b[1]), float(b[2] - b[0]), float(b[3] - b[1])]})
    doc = {"images": images, "annotations": annotations,
           "categories": [{"id": i, "name": n} for i, n in enumerate(CLASS_NAMES)],
           "scenes": ds.scenes, "seed": seed}
    (out / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for scene in ds.scenes:
        (out / scene).mkdir(exist_ok=True)
        for split in SPLITS:
            ids = ds.splits[scene][split]
            (out / scene / f"{split}.ids").write_text("".join(f"{i}\n" for i in ids))


def generate_dataset(spec: SplitSpec, out: Union[str, Path]) -> Dataset:
    ds = generate_in_memory(spec)
    save_dataset(ds, out, spec.seed)
    return ds


class DatasetFormatError(ValueError):
    pass


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DatasetFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    ann_path = path / "annotations.json"
    if not ann_path.exists():
        raise FileNotFoundError(f"no annotations.json under {path}")
    doc = json.loads(ann_path.read_text())
    for key in ("images", "annotations", "categories"):
        _require(doc, key, "annotations.json")
    meta: Dict[int, dict] = {}
    for img in doc["images"]:
        iid = img.get("id", "?")
        where = f"image id {iid}"
        for key in ("id", "file", "width", "height", "scene"):
            _require(img, key, where)
        if img["width"] != img["height"]:
            raise DatasetFormatError(f"{where}: only square images are supported")
        meta[int(img["id"])] = img
    boxes: Dict[int, List[Tuple[List[float], int]]] = {i: [] for i in meta}
    for ann in doc["annotations"]:
        iid = _require(ann, "image_id", "annotation")
        where = f"annotation for image id {iid}"
        cat = _require(ann, "category_id", where)
        bbox = _require(ann, "bbox", where)
        if iid not in meta:
            raise DatasetFormatError(f"{where}: unknown image id")
        if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
            raise DatasetFormatError(f"{where}: bbox must be [x, y, w, h] with positive size, got {bbox}")
        boxes[iid].append(([bbox[0], bbox[1], bbox[0] + bbox[2], bbox[1] + bbox[3]], int(cat)))

    scenes = list(doc.get("scenes") or dict.fromkeys(m["scene"] for m in meta.values()))
    samples: Dict[int, SceneSample] = {}
    for iid, img in sorted(meta.items()):
        tensors, tmeta = checkpoint.load(path / img["file"])
        for key in ("rgb", "x"):
            if key not in tensors:
                raise DatasetFormatError(f"image id {iid}: container lacks tensor {key!r}")
        b = np.array([bb for bb, _ in boxes[iid]], dtype=np.float64).reshape(-1, 4)
        c = np.array([cc for _, cc in boxes[iid]], dtype=np.int64)
        samples[iid] = SceneSample(iid, tensors["rgb"].astype(np.float64), tensors["x"].astype(np.float64),
                                   img["scene"], b, c, int(tmeta.get("seed", 0)))
    splits: Dict[str, Dict[str, List[int]]] = {}
    for scene in scenes:
        splits[scene] = {}
        for split in SPLITS:
            f = path / scene / f"{split}.ids"
            ids = [int(t) for t in f.read_text().split()] if f.exists() else []
            for i in ids:
                if i not in samples:
                    raise DatasetFormatError(f"{f}: id {i} not in annotations")
                if samples[i].scene != scene:
                    raise DatasetFormatError(f"{f}: image id {i} has scene {samples[i].scene!r}")
            splits[scene][split] = ids
    size = int(next(iter(meta.values()))["width"]) if meta else 0
    return Dataset(samples, splits, scenes, size)


def subsample(ids: Sequence[int], percent: float, seed: int, scenes: Mapping[int, str] | None = None) -> List[int]:
    """Seeded subset of exactly ceil(percent/100 * N) ids, stratified by scene if given.

    Per-scene quotas are floors of the proportional share; leftover slots go
    to the scenes with the largest fractional remainders (ties by first appearance).
    """
    ids = list(ids)
    if not 0 < percent <= 100:
        raise ValueError(f"fraction must be in (0, 100], got {percent}")
    total = math.ceil(round(percent / 100 * len(ids), 9))
    rng = np.random.default_rng([seed, int(round(percent * 1000))])
    if scenes is None:
        pick = rng.permutation(len(ids))[:total]
        return [ids[i] for i in sorted(pick)]
    groups: Dict[str, List[int]] = {}
    for i in ids:
        groups.setdefault(scenes[i], []).append(i)
    shares = {s: percent / 100 * len(g) for s, g in groups.items()}
    quota = {s: int(math.floor(round(v, 9))) for s, v in shares.items()}
    left = total - sum(quota.values())
    order = sorted(groups, key=lambda s: -(shares[s] - quota[s]))
    for s in order[:left]:
        quota[s] += 1
    chosen: List[int] = []
    for s, g in groups.items():
        pick = rng.permutation(len(g))[: quota[s]]
        chosen.extend(g[i] for i in sorted(pick))
    return sorted(chosen)
