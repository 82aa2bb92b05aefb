"""Six-way detection error attribution at IoU 0.5 with oracle fix-and-recompute.

Each false positive is labelled Cls, Loc, Both, Dupe or Bkg (checked in the
order Cls, Dupe, Loc, Both, Bkg); unmatched gts not claimed by a Cls/Loc error
are Miss. The delta of an error type is AP50 after fixing only that type,
minus the base AP50.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dethead import iou
from .evalmetrics import DetRecord, GtRecord, ap_from_flags, match_class, sort_detections


class ErrorType(str, Enum):
    CLS = "Cls"
    LOC = "Loc"
    BOTH = "Both"
    DUPE = "Dupe"
    BKG = "Bkg"
    MISS = "Miss"


FP_TYPES = (ErrorType.CLS, ErrorType.LOC, ErrorType.BOTH, ErrorType.DUPE, ErrorType.BKG)
COLUMNS = ("AP50", "Cls", "Loc", "Both", "Dupe", "Bkg", "Miss", "FP", "FN")


@dataclass(frozen=True)
class TideConfig:
    pos_threshold: float = 0.5  # foreground IoU
    bg_threshold: float = 0.1  # background IoU

    def __post_init__(self):
        if not 0 < self.bg_threshold < self.pos_threshold <= 1:
            raise ValueError("need 0 < bg_threshold < pos_threshold <= 1")


@dataclass
class ErrorAnalysis:
    dets: list[DetRecord]  # every detection, canonical order
    labels: list[ErrorType | None]  # None for true positives
    targets: list[int]  # gt index a Cls/Loc/Dupe error points at (else -1); matched gt for TPs
    gts: list[GtRecord]
    matched_gts: set[int]
    missed: set[int]
    classes: tuple[int, ...]

    def count(self, kind: ErrorType) -> int:
        if kind is ErrorType.MISS:
            return len(self.missed)
        return sum(1 for lab in self.labels if lab is kind)

    @property
    def num_fp(self) -> int:
        return sum(1 for lab in self.labels if lab is not None)


def _best(d: DetRecord, cands: Sequence[tuple[int, GtRecord]]) -> tuple[float, int]:
    best, best_g = 0.0, -1
    for g, rec in cands:
        o = iou(d.box, rec.box)
        if o > best:
            best, best_g = o, g
    return best, best_g


def classify_errors(detections: Iterable[DetRecord], gts: Sequence[GtRecord],
                    config: TideConfig = TideConfig()) -> ErrorAnalysis:
    gts = list(gts)
    dets = sort_detections(detections)
    by_image: dict[str, list[tuple[int, GtRecord]]] = defaultdict(list)
    for g, rec in enumerate(gts):
        by_image[rec.image_id].append((g, rec))
    classes = tuple(sorted({g.class_id for g in gts}))

    # greedy TP matching per class, mapped back to global gt indices
    det_pos = {id(d): k for k, d in enumerate(dets)}
    tp_target: dict[int, int] = {}
    for c in {d.class_id for d in dets}:
        local = {img: [r for _, r in lst if r.class_id == c] for img, lst in by_image.items()}
        glob = {img: [g for g, r in lst if r.class_id == c] for img, lst in by_image.items()}
        m = match_class([d for d in dets if d.class_id == c], local, config.pos_threshold)
        for d, hit, j in zip(m.dets, m.tp, m.gt_index):
            if hit:
                tp_target[det_pos[id(d)]] = glob[d.image_id][j]
    matched = set(tp_target.values())

    labels: list[ErrorType | None] = []
    targets: list[int] = []
    for k, d in enumerate(dets):
        if k in tp_target:
            labels.append(None)
            targets.append(tp_target[k])
            continue
        cands = by_image.get(d.image_id, [])
        same_iou, same_g = _best(d, [(g, r) for g, r in cands if r.class_id == d.class_id])
        other_iou, other_g = _best(d, [(g, r) for g, r in cands if r.class_id != d.class_id])
        if other_iou >= config.pos_threshold:
            labels.append(ErrorType.CLS)
            targets.append(other_g)
        elif same_iou >= config.pos_threshold:
            labels.append(ErrorType.DUPE)
            targets.append(same_g)
        elif same_iou >= config.bg_threshold:
            labels.append(ErrorType.LOC)
            targets.append(same_g)
        elif other_iou >= config.bg_threshold:
            labels.append(ErrorType.BOTH)
            targets.append(-1)
        else:
            labels.append(ErrorType.BKG)
            targets.append(-1)
    covered = {t for lab, t in zip(labels, targets) if lab in (ErrorType.CLS, ErrorType.LOC)}
    missed = set(range(len(gts))) - matched - covered
    return ErrorAnalysis(dets, labels, targets, gts, matched, missed, classes)


# ---------------------------------------------------------------------------
# Fix-and-recompute

@dataclass
class _Scene:
    """Per-class ranked TP/FP flags plus positive counts; what AP50 is computed from."""

    entries: dict[int, list[tuple[tuple, bool]]]
    npos: dict[int, int]
    classes: tuple[int, ...]

    def ap50(self) -> float:
        aps = []
        for c in self.classes:
            if self.npos.get(c, 0) <= 0:
                continue
            flags = [tp for _, tp in sorted(self.entries.get(c, []), key=lambda e: e[0])]
            aps.append(ap_from_flags(flags, self.npos[c]))
        return 100.0 * float(np.mean(aps)) if aps else 0.0


def _key(d: DetRecord) -> tuple:
    return (-d.score, d.image_id, tuple(d.box), d.class_id)


def _scene(a: ErrorAnalysis, drop: set[int] = frozenset(), promote: dict[int, int] | None = None,
           removed_gts: set[int] = frozenset()) -> _Scene:
    """Rebuild the ranked lists after deleting detections ``drop`` and turning
    detections in ``promote`` (det -> gt) into true positives of that gt's class."""
    promote = promote or {}
    entries: dict[int, list] = defaultdict(list)
    for k, (d, lab) in enumerate(zip(a.dets, a.labels)):
        if k in drop:
            continue
        if k in promote:
            entries[a.gts[promote[k]].class_id].append((_key(d), True))
        else:
            entries[d.class_id].append((_key(d), lab is None))
    npos: dict[int, int] = defaultdict(int)
    for g, rec in enumerate(a.gts):
        if g not in removed_gts:
            npos[rec.class_id] += 1
    return _Scene(dict(entries), dict(npos), a.classes)


def fixed_scene(a: ErrorAnalysis, kind: ErrorType | str) -> _Scene:
    kind = kind if kind in ("FP", "FN") else ErrorType(kind)
    if kind == "FP":
        return _scene(a, drop={k for k, lab in enumerate(a.labels) if lab is not None})
    if kind == "FN":
        return _scene(a, removed_gts=set(range(len(a.gts))) - a.matched_gts)
    if kind is ErrorType.MISS:
        return _scene(a, removed_gts=a.missed)
    idx = [k for k, lab in enumerate(a.labels) if lab is kind]
    if kind in (ErrorType.CLS, ErrorType.LOC):
        # the highest-scoring error claims an unmatched gt; later claimants would be duplicates
        claimed, promote, drop = set(a.matched_gts), {}, set()
        for k in idx:
            g = a.targets[k]
            if g in claimed:
                drop.add(k)
            else:
                claimed.add(g)
                promote[k] = g
        return _scene(a, drop=drop, promote=promote)
    return _scene(a, drop=set(idx))


@dataclass
class TideReport:
    ap50: float
    deltas: dict[str, float]  # error type (and FP, FN) -> delta AP50
    counts: dict[str, int]
    gt_fingerprint: str

    def row(self) -> dict[str, float]:
        return {"AP50": self.ap50, **{c: self.deltas[c] for c in COLUMNS[1:]}}

    def to_json(self) -> dict:
        return {"AP50": self.ap50, "deltas": self.deltas, "counts": self.counts,
                "gt_fingerprint": self.gt_fingerprint}

    @classmethod
    def from_json(cls, obj: dict) -> "TideReport":
        return cls(obj["AP50"], obj["deltas"], obj["counts"], obj["gt_fingerprint"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TideReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def gt_fingerprint(gts: Iterable[GtRecord]) -> str:
    rows = sorted((g.image_id, tuple(round(v, 4) for v in g.box), g.class_id) for g in gts)
    return hashlib.sha256(json.dumps(rows).encode()).hexdigest()[:16]


def tide_deltas(detections: Iterable[DetRecord], gts: Sequence[GtRecord],
                config: TideConfig = TideConfig()) -> TideReport:
    a = classify_errors(detections, gts, config)
    base = _scene(a).ap50()
    deltas = {}
    for kind in list(ErrorType) + ["FP", "FN"]:
        name = kind.value if isinstance(kind, ErrorType) else kind
        deltas[name] = fixed_scene(a, kind).ap50() - base
    counts = {t.value: a.count(t) for t in ErrorType}
    counts["FP"] = a.num_fp
    counts["FN"] = len(a.gts) - len(a.matched_gts)
    return TideReport(base, deltas, counts, gt_fingerprint(a.gts))


def compare_reports(a: TideReport, b: TideReport) -> dict[str, float]:
    """Column-wise ``b - a`` over AP50 and the eight delta columns."""
    if a.gt_fingerprint != b.gt_fingerprint:
        raise ValueError("reports were computed on different ground-truth sets")
    ra, rb = a.row(), b.row()
    return {c: rb[c] - ra[c] for c in COLUMNS}


def format_table(rows: Sequence[tuple[str, dict[str, float]]]) -> str:
    head = f"{'':<24}" + "".join(f"{c:>8}" for c in COLUMNS)
    lines = [head]
    for label, r in rows:
        lines.append(f"{label:<24}" + "".join(f"{r[c]:>8.2f}" for c in COLUMNS))
    return "\n".join(lines)


def comparison_table(a: TideReport, b: TideReport, label_a: str = "A", label_b: str = "B") -> str:
    return format_table([(label_a, a.row()), (label_b, b.row()), ("Δ", compare_reports(a, b))])
