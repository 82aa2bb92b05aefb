"""Multi-threshold detection AP and segmentation mIoU."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .dataio import IGNORE_LABEL, Dataset
from .dethead import iou

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


class DetRecord(NamedTuple):
    image_id: str
    box: tuple[float, float, float, float]
    class_id: int
    score: float


class GtRecord(NamedTuple):
    image_id: str
    box: tuple[float, float, float, float]
    class_id: int


def sort_detections(dets: Iterable[DetRecord]) -> list[DetRecord]:
    """Descending score; equal scores fall back to (image, box) so the result
    does not depend on input order."""
    return sorted(dets, key=lambda d: (-d.score, d.image_id, tuple(d.box), d.class_id))


@dataclass
class ClassMatch:
    dets: list[DetRecord]  # sorted
    tp: list[bool]
    gt_index: list[int]  # index into gts[image] of the matched gt, -1 if FP
    npos: int


def match_class(dets: Iterable[DetRecord], gts: dict[str, list[GtRecord]], threshold: float) -> ClassMatch:
    """Greedy matching for one class.

    Each detection (highest score first) takes the unmatched gt of highest IoU,
    provided that IoU reaches ``threshold``; IoU ties go to the lower gt index.
    """
    dets = sort_detections(dets)
    used = {img: [False] * len(g) for img, g in gts.items()}
    tp, gt_index = [], []
    for d in dets:
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(d.image_id, ())):
            if used[d.image_id][j]:
                continue
            o = iou(d.box, g.box)
            if o >= threshold and o > best:
                best, best_j = o, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
        tp.append(best_j >= 0)
        gt_index.append(best_j)
    return ClassMatch(dets, tp, gt_index, sum(len(g) for g in gts.values()))


def ap_from_flags(tp: Sequence[bool], npos: int, eleven_point: bool = False) -> float:
    """Area under the interpolated precision-recall curve, in [0, 1]."""
    if npos <= 0:
        return float("nan")
    tp_arr = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp_arr)
    cfp = np.cumsum(1.0 - tp_arr)
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    if eleven_point:
        ap = 0.0
        for t in np.arange(0.0, 1.1, 0.1):
            p = prec[rec >= t].max() if np.any(rec >= t) else 0.0
            ap += p / 11.0
        return float(ap)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _group_gts(gts: Iterable[GtRecord], class_id: int) -> dict[str, list[GtRecord]]:
    out = defaultdict(list)
    for g in gts:
        if g.class_id == class_id:
            out[g.image_id].append(g)
    return dict(out)


def compute_ap(detections: Iterable[DetRecord], gts: Iterable[GtRecord], class_id: int,
               iou_threshold: float, eleven_point: bool = False) -> float:
    """AP (0-100) of one class at one IoU threshold; NaN when the class has no gt."""
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"IoU threshold {iou_threshold} outside (0, 1]")
    dets = [d for d in detections if d.class_id == class_id]
    m = match_class(dets, _group_gts(gts, class_id), iou_threshold)
    return 100.0 * ap_from_flags(m.tp, m.npos, eleven_point)


@dataclass
class APResult:
    per_class: dict[tuple[int, float], float]
    thresholds: tuple[float, ...]
    classes: tuple[int, ...]

    def class_mean(self, threshold: float) -> float:
        if not self.classes:
            return 0.0
        return float(np.mean([self.per_class[(c, threshold)] for c in self.classes]))

    @property
    def ap50(self) -> float:
        return self.class_mean(0.5)

    @property
    def map(self) -> float:
        return float(np.mean([self.class_mean(t) for t in self.thresholds]))

    def to_json(self) -> dict:
        return {
            "AP": {str(c): {f"{t:.2f}": self.per_class[(c, t)] for t in self.thresholds} for c in self.classes},
            "AP50": self.ap50,
            "mAP": self.map,
        }


def compute_map(detections: Iterable[DetRecord], gts: Iterable[GtRecord],
                thresholds: Sequence[float] = IOU_THRESHOLDS, eleven_point: bool = False) -> APResult:
    """Class-mean AP per threshold, then the mean over thresholds.

    Only classes with at least one gt enter the mean.
    """
    detections, gts = list(detections), list(gts)
    classes = tuple(sorted({g.class_id for g in gts}))
    per = {}
    for c in classes:
        dets_c = [d for d in detections if d.class_id == c]
        gts_c = _group_gts(gts, c)
        for t in thresholds:
            per[(c, t)] = 100.0 * ap_from_flags(match_class(dets_c, gts_c, t).tp,
                                                sum(map(len, gts_c.values())), eleven_point)
    return APResult(per, tuple(thresholds), classes)


@dataclass
class IoUResult:
    intersection: np.ndarray
    union: np.ndarray

    @property
    def per_class(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.intersection / np.maximum(self.union, 1), np.nan)

    @property
    def miou(self) -> float:
        valid = self.union > 0
        if not valid.any():
            return 0.0
        return float(100.0 * np.mean(self.intersection[valid] / self.union[valid]))

    def to_json(self) -> dict:
        return {"IoU": [None if np.isnan(v) else 100.0 * float(v) for v in self.per_class], "mIoU": self.miou}


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_label
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def compute_miou(preds: Iterable[np.ndarray], gts: Iterable[np.ndarray], num_classes: int,
                 ignore_label: int = IGNORE_LABEL) -> IoUResult:
    """Global (dataset-level) confusion counts; classes with empty union are skipped."""
    cm = np.zeros((num_classes, num_classes), np.int64)
    for p, g in zip(preds, gts, strict=True):
        cm += confusion_matrix(np.asarray(p), np.asarray(g), num_classes, ignore_label)
    inter = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - inter
    return IoUResult(inter, union)


# ---------------------------------------------------------------------------
# Interchange formats

def gt_records(dataset: Dataset) -> list[GtRecord]:
    out = []
    for s in dataset:
        if s.boxes is None:
            continue
        for b, c in zip(s.boxes, s.labels):
            out.append(GtRecord(s.id, tuple(float(v) for v in b), int(c)))
    return out


def write_predictions(records: Iterable[DetRecord], path: str | Path) -> None:
    rows = sorted(records, key=lambda d: (d.image_id, -d.score))
    data = [{"image_id": d.image_id, "x1": d.box[0], "y1": d.box[1], "x2": d.box[2], "y2": d.box[3],
             "class": d.class_id, "score": d.score} for d in rows]
    Path(path).write_text(json.dumps(data, indent=1), encoding="utf-8")


def read_predictions(path: str | Path) -> list[DetRecord]:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return [DetRecord(str(r["image_id"]), (float(r["x1"]), float(r["y1"]), float(r["x2"]), float(r["y2"])),
                      int(r["class"]), float(r["score"])) for r in rows]


def read_gt_annotations(path: str | Path) -> list[GtRecord]:
    """Ground-truth boxes from a dataset root or its ``annotations.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    out = []
    for rec in json.loads(path.read_text(encoding="utf-8")):
        for b in rec.get("boxes") or ():
            out.append(GtRecord(str(rec["id"]), (float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"])),
                                int(b["class"])))
    return out
