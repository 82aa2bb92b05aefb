"""Datasets, partial-annotation splits, task schedules and the synthetic shapes set.

Boxes use absolute-pixel corners ``(x1, y1, x2, y2)`` with inclusive-exclusive
semantics: a box covers pixel columns ``x1 .. x2-1`` and rows ``y1 .. y2-1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

IGNORE_LABEL = 255


class Task(str, Enum):
    DET = "det"
    SEG = "seg"

    @property
    def other(self) -> "Task":
        return Task.SEG if self is Task.DET else Task.DET


class ScheduleMode(str, Enum):
    EPOCH = "epoch"
    ITERATION = "iteration"


class DatasetError(ValueError):
    """Raised for malformed datasets, annotation files and split requests."""


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    boxes: np.ndarray | None = None  # (n, 4) float32 corners
    labels: np.ndarray | None = None  # (n,) int64 class ids, 1-based
    mask: np.ndarray | None = None  # H x W uint8 class ids, 255 = ignore
    task_tag: Task | None = None

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (self.boxes is None) != (self.labels is None):
            raise DatasetError(f"{self.id}: boxes and labels must be given together")
        if self.boxes is not None:
            b = self.boxes
            if b.ndim != 2 or b.shape[1] != 4 or len(self.labels) != len(b):
                raise DatasetError(f"{self.id}: boxes must be (n, 4) with one label each")
            bad = (b[:, 0] < 0) | (b[:, 0] >= b[:, 2]) | (b[:, 2] > w) | \
                  (b[:, 1] < 0) | (b[:, 1] >= b[:, 3]) | (b[:, 3] > h)
            if bad.any():
                raise DatasetError(f"{self.id}: invalid box {b[np.argmax(bad)].tolist()}")
        if self.mask is not None and self.mask.shape != (h, w):
            raise DatasetError(f"{self.id}: mask shape {self.mask.shape} != image {(h, w)}")
        if self.task_tag is Task.DET and (self.boxes is None or self.mask is not None):
            raise DatasetError(f"{self.id}: DET-tagged sample must carry boxes only")
        if self.task_tag is Task.SEG and (self.mask is None or self.boxes is not None):
            raise DatasetError(f"{self.id}: SEG-tagged sample must carry a mask only")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def has_mask(self) -> bool:
        return self.mask is not None

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.task_tag == other.task_tag
            and np.array_equal(self.image, other.image)
            and _opt_equal(self.boxes, other.boxes)
            and _opt_equal(self.labels, other.labels)
            and _opt_equal(self.mask, other.mask)
        )


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(frozen=True)
class Dataset:
    """Immutable, id-sorted collection of samples plus class vocabularies.

    ``class_names`` lists the detection classes (box label ``k`` is
    ``class_names[k - 1]``); ``seg_class_names`` lists segmentation classes with
    background at index 0.
    """

    samples: tuple[Sample, ...]
    class_names: tuple[str, ...]
    seg_class_names: tuple[str, ...]

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate sample ids")
        object.__setattr__(self, "samples", tuple(sorted(self.samples, key=lambda s: s.id)))
        object.__setattr__(self, "_index", {s.id: i for i, s in enumerate(self.samples)})
        for s in self.samples:
            if s.mask is not None:
                valid = s.mask[s.mask != IGNORE_LABEL]
                if valid.size and int(valid.max()) >= len(self.seg_class_names):
                    raise DatasetError(f"{s.id}: mask class {int(valid.max())} out of range")
            if s.labels is not None and len(s.labels):
                if s.labels.min() < 1 or s.labels.max() > len(self.class_names):
                    raise DatasetError(f"{s.id}: box class out of range")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, sample_id: str) -> Sample:
        return self.samples[self._index[sample_id]]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_seg_classes(self) -> int:
        return len(self.seg_class_names)

    def subset(self, ids: Iterable[str]) -> "Dataset":
        return replace(self, samples=tuple(self[i] for i in ids))


# ---------------------------------------------------------------------------
# Partial splits

@dataclass(frozen=True)
class PartialSplit:
    det_ids: tuple[str, ...]
    seg_ids: tuple[str, ...]
    seed: int

    def __post_init__(self):
        if set(self.det_ids) & set(self.seg_ids):
            raise DatasetError("det_ids and seg_ids overlap")

    def ids(self, task: Task) -> tuple[str, ...]:
        return self.det_ids if Task(task) is Task.DET else self.seg_ids

    def to_json(self) -> dict:
        return {"seed": self.seed, "det_ids": list(self.det_ids), "seg_ids": list(self.seg_ids)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "PartialSplit":
        return cls(tuple(sorted(obj["det_ids"])), tuple(sorted(obj["seg_ids"])), int(obj["seed"]))


def _mask_flags(dataset) -> dict[str, bool]:
    if isinstance(dataset, Mapping):
        return {str(k): bool(v) for k, v in dataset.items()}
    return {s.id: s.has_mask for s in dataset}


def split_partial(dataset, seed: int, seg_size: int | None = None,
                  seg_fraction: float = 0.5) -> PartialSplit:
    """Randomly bipartition ids into a detection and a segmentation subset.

    ``dataset`` is a :class:`Dataset` (or any iterable of samples) or a mapping
    ``id -> has_mask``. Ids without masks always go to the detection side; the
    segmentation side receives ``seg_size`` mask-bearing ids drawn uniformly
    (default ``round(seg_fraction * n)``).
    """
    flags = _mask_flags(dataset)
    if not flags:
        raise DatasetError("cannot split an empty dataset")
    ids = sorted(flags)
    if seg_size is None:
        seg_size = int(round(seg_fraction * len(ids)))
    with_mask = [i for i in ids if flags[i]]
    if seg_size > len(with_mask):
        raise DatasetError(
            f"requested {seg_size} segmentation ids but only {len(with_mask)} of "
            f"{len(ids)} samples carry masks")
    rng = np.random.default_rng(seed)
    chosen = {with_mask[k] for k in rng.permutation(len(with_mask))[:seg_size]}
    det = tuple(i for i in ids if i not in chosen)
    seg = tuple(i for i in ids if i in chosen)
    return PartialSplit(det, seg, seed)


def halve_subset(split: PartialSplit, which: Task | str, seed: int) -> PartialSplit:
    """Drop ``floor(n / 2)`` uniformly chosen ids from one side of the split."""
    which = Task(which)
    ids = split.ids(which)
    if not ids:
        raise DatasetError(f"{which.value} subset is empty")
    rng = np.random.default_rng(seed)
    drop = set(rng.choice(len(ids), size=len(ids) // 2, replace=False).tolist())
    kept = tuple(i for k, i in enumerate(ids) if k not in drop)
    if which is Task.DET:
        return replace(split, det_ids=kept)
    return replace(split, seg_ids=kept)


def apply_split(dataset: Dataset, split: PartialSplit) -> tuple[Dataset, Dataset]:
    """Materialize the two single-task subsets, withholding the other annotation."""
    det = [replace(dataset[i], mask=None, task_tag=Task.DET) for i in split.det_ids]
    seg = [replace(dataset[i], boxes=None, labels=None, task_tag=Task.SEG) for i in split.seg_ids]
    return replace(dataset, samples=tuple(det)), replace(dataset, samples=tuple(seg))


# ---------------------------------------------------------------------------
# Schedules

@dataclass(frozen=True)
class EpochSchedule:
    iterations: tuple[tuple[Task, tuple[str, ...]], ...]
    mode: ScheduleMode

    def __len__(self):
        return len(self.iterations)

    def tasks(self) -> list[Task]:
        return [t for t, _ in self.iterations]


def _batches(ids: Sequence[str], batch_size: int) -> list[tuple[str, ...]]:
    return [tuple(ids[k:k + batch_size]) for k in range(0, len(ids), batch_size)]


def _pad_to(ids: list[str], length: int, rng: np.random.Generator) -> list[str]:
    # whole shuffled copies first, then a uniform with-replacement remainder
    out = []
    while len(out) + len(ids) <= length:
        out.extend(ids[k] for k in rng.permutation(len(ids)))
    out.extend(ids[k] for k in rng.integers(0, len(ids), size=length - len(out)))
    return out


def make_epoch_schedule(split: PartialSplit, batch_size: int, mode: ScheduleMode | str,
                        seed: int, epoch: int = 0) -> EpochSchedule:
    """Batch order for one epoch of multi-task training on a partial split.

    EPOCH mode emits every DET batch then every SEG batch (SEG first on odd
    epochs). ITERATION mode alternates DET/SEG batches; the smaller subset is
    padded by resampling so both tasks contribute the same number of batches.
    """
    mode = ScheduleMode(mode)
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    if not split.det_ids or not split.seg_ids:
        raise DatasetError("both subsets must be non-empty")
    rng = np.random.default_rng([seed, epoch])
    det = [split.det_ids[k] for k in rng.permutation(len(split.det_ids))]
    seg = [split.seg_ids[k] for k in rng.permutation(len(split.seg_ids))]
    if mode is ScheduleMode.EPOCH:
        order = [(Task.DET, det), (Task.SEG, seg)]
        if epoch % 2:
            order.reverse()
        its = [(t, b) for t, ids in order for b in _batches(ids, batch_size)]
        return EpochSchedule(tuple(its), mode)
    n = max(len(det), len(seg))
    if len(det) < n:
        det = _pad_to(det, n, rng)
    if len(seg) < n:
        seg = _pad_to(seg, n, rng)
    its = []
    for bd, bs in zip(_batches(det, batch_size), _batches(seg, batch_size)):
        its += [(Task.DET, bd), (Task.SEG, bs)]
    return EpochSchedule(tuple(its), mode)


def single_task_batches(ids: Sequence[str], batch_size: int, seed: int, epoch: int = 0) -> list[tuple[str, ...]]:
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    return _batches([ids[k] for k in rng.permutation(len(ids))], batch_size)


# ---------------------------------------------------------------------------
# Class maps

@dataclass(frozen=True)
class ClassMap:
    """Maps source segmentation ids to group ids; 0 and 255 map to themselves."""

    mapping: Mapping[int, int]
    group_names: tuple[str, ...]

    def lookup_table(self) -> np.ndarray:
        lut = np.full(256, -1, dtype=np.int64)
        lut[0] = 0
        lut[IGNORE_LABEL] = IGNORE_LABEL
        for src, dst in self.mapping.items():
            lut[int(src)] = int(dst)
        return lut


VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)

_VOC_GROUPS = {
    "vehicle": ("aeroplane", "bicycle", "boat", "bus", "car", "motorbike", "train"),
    "animal": ("bird", "cat", "cow", "dog", "horse", "sheep"),
    "furniture": ("bottle", "chair", "diningtable", "pottedplant", "sofa", "tvmonitor"),
    "person": ("person",),
}

VOC_GROUP_MAP = ClassMap(
    mapping={VOC_CLASSES.index(c) + 1: g + 1
             for g, members in enumerate(_VOC_GROUPS.values()) for c in members},
    group_names=tuple(_VOC_GROUPS),
)


def remap_classes(dataset: Dataset, class_map: ClassMap) -> Dataset:
    lut = class_map.lookup_table()
    samples = []
    for s in dataset:
        if s.mask is None:
            samples.append(s)
            continue
        present = np.unique(s.mask)
        missing = present[lut[present] < 0]
        if missing.size:
            raise DatasetError(f"{s.id}: class id {int(missing[0])} has no group")
        samples.append(replace(s, mask=lut[s.mask].astype(np.uint8)))
    return Dataset(tuple(samples), dataset.class_names,
                   ("background",) + tuple(class_map.group_names))


# ---------------------------------------------------------------------------
# Synthetic shapes

SHAPES = ("rectangle", "ellipse", "triangle")


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: tuple[int, int] = (64, 64)  # (H, W)
    classes: tuple[str, ...] = SHAPES
    min_objects: int = 1
    max_objects: int = 4
    min_size: int = 12
    max_size: int = 32
    noise: float = 0.08

    def __post_init__(self):
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise DatasetError(f"unknown shape classes {sorted(unknown)}")
        if not 1 <= self.min_objects <= self.max_objects:
            raise DatasetError("need 1 <= min_objects <= max_objects")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "classes" in d:
            d["classes"] = tuple(d["classes"])
        return cls(**d)


def rasterize(kind: str, corners: Sequence[float], height: int, width: int) -> np.ndarray:
    """Boolean coverage of a shape inscribed in ``corners``, sampled at pixel centres."""
    x1, y1, x2, y2 = corners
    if kind == "rectangle":
        m = np.zeros((height, width), bool)
        m[max(int(y1), 0):int(y2), max(int(x1), 0):int(x2)] = True
        return m
    py, px = np.mgrid[0:height, 0:width] + 0.5
    if kind == "ellipse":
        cx, cy, rx, ry = (x1 + x2) / 2, (y1 + y2) / 2, (x2 - x1) / 2, (y2 - y1) / 2
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    if kind == "triangle":
        verts = [(x1, y2), (x2, y2), ((x1 + x2) / 2, y1)]
        inside = np.ones((height, width), bool)
        for (ax, ay), (bx, by) in zip(verts, verts[1:] + verts[:1]):
            inside &= (bx - ax) * (py - ay) - (by - ay) * (px - ax) <= 0
        return inside
    raise DatasetError(f"unknown shape {kind!r}")


def tight_box(m: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(m)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def _background(h: int, w: int, rng: np.random.Generator, noise: float) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=3)
    coarse = rng.normal(0, 0.12, size=(h // 8 + 1, w // 8 + 1, 3))
    smooth = np.kron(coarse, np.ones((8, 8, 1)))[:h, :w]
    return base + smooth + rng.normal(0, noise, size=(h, w, 3))


def render_scene(shapes: Sequence[tuple[str, Sequence[float], Sequence[float]]],
                 spec: SyntheticSpec, rng: np.random.Generator):
    """Paint ``(kind, corners, rgb)`` shapes onto a textured background.

    Returns ``(image, boxes, labels, mask)``; boxes are the tight extents of the
    painted pixels, labels index ``spec.classes`` from 1.
    """
    h, w = spec.image_size
    img = _background(h, w, rng, spec.noise)
    mask = np.zeros((h, w), np.uint8)
    boxes, labels = [], []
    for kind, corners, color in shapes:
        m = rasterize(kind, corners, h, w) & (mask == 0)
        if not m.any():
            raise DatasetError(f"degenerate {kind} at {list(corners)}")
        cls = spec.classes.index(kind) + 1
        shade = np.asarray(color) + rng.normal(0, spec.noise / 2, size=(h, w, 3))
        img[m] = shade[m]
        mask[m] = cls
        boxes.append(tight_box(m))
        labels.append(cls)
    img = np.round(np.clip(img, 0, 1) * 255) / 255
    return (img.astype(np.float32), np.asarray(boxes, np.float32).reshape(-1, 4),
            np.asarray(labels, np.int64), mask)


def _random_layout(spec: SyntheticSpec, rng: np.random.Generator):
    h, w = spec.image_size
    target = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    placed: list[tuple[int, int, int, int]] = []
    shapes = []
    for _ in range(50 * target):
        if len(shapes) == target:
            break
        bw, bh = rng.integers(spec.min_size, spec.max_size + 1, size=2)
        bw, bh = min(int(bw), w), min(int(bh), h)
        x1 = int(rng.integers(0, w - bw + 1))
        y1 = int(rng.integers(0, h - bh + 1))
        box = (x1, y1, x1 + bw, y1 + bh)
        # keep a one-pixel gap so instances never touch
        if any(box[0] <= b[2] and b[0] <= box[2] and box[1] <= b[3] and b[1] <= box[3] for b in placed):
            continue
        placed.append(box)
        kind = spec.classes[int(rng.integers(len(spec.classes)))]
        shapes.append((kind, box, rng.uniform(0, 1, size=3)))
    return shapes


def generate_synthetic(n: int, spec: SyntheticSpec | None = None, seed: int = 0,
                       prefix: str = "syn") -> Dataset:
    """Deterministic shapes dataset where every image has both boxes and a mask."""
    if n < 1:
        raise DatasetError("n must be >= 1")
    spec = spec or SyntheticSpec()
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img, boxes, labels, mask = render_scene(_random_layout(spec, rng), spec, rng)
        samples.append(Sample(f"{prefix}_{i:06d}", img, boxes, labels, mask))
    return Dataset(tuple(samples), tuple(spec.classes), ("background",) + tuple(spec.classes))


# ---------------------------------------------------------------------------
# On-disk layout

def save_dataset(dataset: Dataset, root: str | Path, split: PartialSplit | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    records = []
    for s in dataset:
        Image.fromarray(np.round(s.image * 255).astype(np.uint8)).save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray(s.mask).save(root / "masks" / f"{s.id}.png")
        boxes = None
        if s.boxes is not None:
            boxes = [{"x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3]),
                      "class": int(c)} for b, c in zip(s.boxes, s.labels)]
        rec = {"id": s.id, "width": s.width, "height": s.height, "boxes": boxes}
        if s.task_tag is not None:
            rec["task"] = s.task_tag.value
        records.append(rec)
    meta = {"class_names": list(dataset.class_names), "seg_class_names": list(dataset.seg_class_names)}
    _write_json(root / "annotations.json", records)
    _write_json(root / "classes.json", meta)
    if split is not None:
        _write_json(root / "split.json", split.to_json())


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, ensure_ascii=False), encoding="utf-8")


def _parse_record(rec, path: Path):
    try:
        sid = str(rec["id"])
        w, h = int(rec["width"]), int(rec["height"])
        raw = rec["boxes"]
        boxes = labels = None
        if raw is not None:
            boxes = np.array([[b["x1"], b["y1"], b["x2"], b["y2"]] for b in raw], np.float32).reshape(-1, 4)
            labels = np.array([b["class"] for b in raw], np.int64)
        task = Task(rec["task"]) if rec.get("task") else None
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"{path}: malformed record {json.dumps(rec)[:200]} ({e!r})") from None
    return sid, w, h, boxes, labels, task


def load_dataset(root: str | Path, apply_stored_split: bool = False) -> Dataset:
    """Read the ``images/ masks/ annotations.json`` layout written by :func:`save_dataset`."""
    root = Path(root)
    ann_path = root / "annotations.json"
    try:
        records = json.loads(ann_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"{ann_path}: {e}") from None
    if not isinstance(records, list):
        raise DatasetError(f"{ann_path}: expected a JSON array")
    meta_path = root / "classes.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else None
    samples = []
    max_cls = 0
    for rec in records:
        sid, w, h, boxes, labels, task = _parse_record(rec, ann_path)
        img = np.asarray(Image.open(root / "images" / f"{sid}.png").convert("RGB"), np.float32) / 255
        if img.shape[:2] != (h, w):
            raise DatasetError(f"{ann_path}: {sid} image is {img.shape[1]}x{img.shape[0]}, record says {w}x{h}")
        mpath = root / "masks" / f"{sid}.png"
        mask = None
        if mpath.exists():
            mask = np.asarray(Image.open(mpath), np.uint8)
        elif task is Task.SEG:
            raise DatasetError(f"{mpath}: missing mask for SEG-tagged sample {sid}")
        try:
            samples.append(Sample(sid, img, boxes, labels, mask, task))
        except DatasetError as e:
            raise DatasetError(f"{ann_path}: {e}") from None
        if labels is not None and len(labels):
            max_cls = max(max_cls, int(labels.max()))
    if meta:
        names, seg_names = tuple(meta["class_names"]), tuple(meta["seg_class_names"])
    else:
        names = tuple(f"class{k}" for k in range(1, max_cls + 1))
        seg_names = ("background",) + names
    ds = Dataset(tuple(samples), names, seg_names)
    if apply_stored_split and (root / "split.json").exists():
        det, seg = apply_split(ds, load_split(root / "split.json"))
        ds = Dataset(det.samples + seg.samples, names, seg_names)
    return ds


def load_split(path: str | Path) -> PartialSplit:
    return PartialSplit.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def save_split(split: PartialSplit, path: str | Path) -> None:
    _write_json(Path(path), split.to_json())


# ---------------------------------------------------------------------------
# VOC id lists

# Segmentation-side size of the published VOC partial split (7,558 det / 7,656 seg).
VOC_SEG_SUBSET_SIZE = 7656


def load_voc_id_lists(det_list: str | Path, seg_list: str | Path) -> dict[str, bool]:
    """Read ImageSets-style id lists; returns ``id -> has_mask``.

    ``det_list`` names every trainable (box-annotated) image, ``seg_list`` the
    images that also carry a segmentation mask.
    """
    det_ids = _read_ids(det_list)
    seg_ids = set(_read_ids(seg_list))
    stray = seg_ids - set(det_ids)
    if stray:
        raise DatasetError(f"{seg_list}: {len(stray)} ids lack box annotations, e.g. {sorted(stray)[0]}")
    return {i: i in seg_ids for i in det_ids}


def _read_ids(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").split()
    return sorted(set(lines))
