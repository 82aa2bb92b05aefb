"""One-stage anchor-based detection head: anchors, assignment, losses, decoding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BG = -1
IGNORE = -2
DELTA_STD = (0.1, 0.1, 0.2, 0.2)
_MAX_LOG_SCALE = math.log(1000.0 / 16)


@dataclass
class DetHeadConfig:
    num_classes: int = 3
    conv_blocks: int = 2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    bl1_alpha: float = 0.5
    bl1_gamma: float = 1.5
    anchor_size: float = 2.0  # anchor side in units of the level stride
    anchor_scales: tuple[float, ...] = (1.0,)
    anchor_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)  # height / width
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    pre_nms_topk: int = 1000
    prior_prob: float = 0.01

    def __post_init__(self):
        self.anchor_scales = tuple(self.anchor_scales)
        self.anchor_ratios = tuple(self.anchor_ratios)
        if not 0 < self.neg_iou <= self.pos_iou <= 1:
            raise ValueError("need 0 < neg_iou <= pos_iou <= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def bl1_b(self) -> float:
        # continuity of the gradient at |x| = 1: alpha * ln(b + 1) = gamma
        return math.exp(self.bl1_gamma / self.bl1_alpha) - 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchor_scales"] = list(self.anchor_scales)
        d["anchor_ratios"] = list(self.anchor_ratios)
        return d


class Detection(NamedTuple):
    box: tuple[float, float, float, float]
    class_id: int
    score: float


# ---------------------------------------------------------------------------
# Geometry

def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def generate_anchors(shapes: Sequence[tuple[int, int]], strides: Sequence[int],
                     cfg: DetHeadConfig) -> list[torch.Tensor]:
    """Per-level (H*W*A, 4) anchors as (cx, cy, w, h), ordered (row, col, anchor)."""
    out = []
    for (h, w), s in zip(shapes, strides):
        wh = []
        for scale in cfg.anchor_scales:
            side = cfg.anchor_size * s * scale
            for r in cfg.anchor_ratios:
                wh.append((side / math.sqrt(r), side * math.sqrt(r)))
        wh = torch.tensor(wh, dtype=torch.float64)
        ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                                indexing="ij")
        ctr = torch.stack([(xs + 0.5) * s, (ys + 0.5) * s], -1).reshape(-1, 1, 2)
        ctr = ctr.expand(-1, len(wh), 2)
        out.append(torch.cat([ctr, wh[None].expand(ctr.shape[0], -1, -1)], -1).reshape(-1, 4))
    return out


def cxcywh_to_corners(a: torch.Tensor) -> torch.Tensor:
    return torch.cat([a[:, :2] - a[:, 2:] / 2, a[:, :2] + a[:, 2:] / 2], 1)


def encode_boxes(gt: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Corner gt boxes -> normalized (dx, dy, dw, dh) relative to (cx, cy, w, h) anchors."""
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + gw / 2, gt[:, 1] + gh / 2
    ax, ay, aw, ah = anchors.unbind(1)
    d = torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], 1)
    return d / d.new_tensor(DELTA_STD)


def decode_boxes(deltas: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    d = deltas * deltas.new_tensor(DELTA_STD)
    ax, ay, aw, ah = anchors.to(deltas.dtype).unbind(1)
    cx, cy = ax + d[:, 0] * aw, ay + d[:, 1] * ah
    w = aw * torch.exp(d[:, 2].clamp(max=_MAX_LOG_SCALE))
    h = ah * torch.exp(d[:, 3].clamp(max=_MAX_LOG_SCALE))
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], 1)


class DetTargets(NamedTuple):
    labels: torch.Tensor  # (N,) class index 0..K-1, BG or IGNORE
    deltas: torch.Tensor  # (N, 4), meaningful where labels >= 0
    matched: torch.Tensor  # (N,) gt index or -1


def match_anchors(anchors: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                  cfg: DetHeadConfig) -> DetTargets:
    """Max-IoU assignment with force-matching of each gt's best anchor.

    ``anchors`` are all levels concatenated (cx, cy, w, h); ``gt_labels`` are
    1-based class ids.
    """
    n = anchors.shape[0]
    labels = torch.full((n,), BG, dtype=torch.long)
    deltas = torch.zeros((n, 4), dtype=torch.float64)
    matched = torch.full((n,), -1, dtype=torch.long)
    if len(gt_boxes) == 0 or n == 0:
        return DetTargets(labels, deltas, matched)
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64)
    gt_labels = torch.as_tensor(gt_labels, dtype=torch.long)
    overlaps = box_iou(cxcywh_to_corners(anchors), gt_boxes)  # (N, G)
    best, idx = overlaps.max(1)
    labels[best >= cfg.neg_iou] = IGNORE
    pos = best >= cfg.pos_iou
    matched[pos] = idx[pos]
    # argmax returns the first maximum, i.e. ties go to the lowest anchor index
    for g in range(len(gt_boxes)):
        a = int(torch.argmax(overlaps[:, g]))
        matched[a] = g
    pos = matched >= 0
    labels[pos] = gt_labels[matched[pos]] - 1
    deltas[pos] = encode_boxes(gt_boxes[matched[pos]], anchors[pos])
    return DetTargets(labels, deltas, matched)


# ---------------------------------------------------------------------------
# Head

def _branch(c: int, blocks: int, out: int) -> nn.Sequential:
    layers = []
    for _ in range(blocks):
        layers += [nn.Conv2d(c, c, 3, 1, 1), nn.ReLU()]
    layers.append(nn.Conv2d(c, out, 3, 1, 1))
    return nn.Sequential(*layers)


class DetHead(nn.Module):
    """Classification and box branches of identical shape, shared across levels."""

    def __init__(self, in_channels: int, cfg: DetHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        a = cfg.num_anchors
        self.cls_branch = _branch(in_channels, cfg.conv_blocks, a * cfg.num_classes)
        self.box_branch = _branch(in_channels, cfg.conv_blocks, a * 4)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, std=0.01)
                nn.init.zeros_(m.bias)
        nn.init.constant_(self.cls_branch[-1].bias, -math.log((1 - cfg.prior_prob) / cfg.prior_prob))

    def forward(self, feats: Sequence[torch.Tensor]):
        """Returns per-level ``(logits (B, HWA, K), deltas (B, HWA, 4))``."""
        outs = []
        k = self.cfg.num_classes
        for f in feats:
            if f.shape[1] != self.in_channels:
                raise ValueError(f"detection head expects {self.in_channels} channels, got {f.shape[1]}")
            b = f.shape[0]
            logits = self.cls_branch(f).permute(0, 2, 3, 1).reshape(b, -1, k)
            deltas = self.box_branch(f).permute(0, 2, 3, 1).reshape(b, -1, 4)
            outs.append((logits, deltas))
        return outs


# ---------------------------------------------------------------------------
# Losses

def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float | None = 0.25,
               gamma: float = 2.0, reduction: str = "sum") -> torch.Tensor:
    """Sigmoid focal loss on per-class binary targets of the same shape as ``logits``.

    ``alpha=None`` disables the class-balance weight. ``reduction`` is
    ``"sum"``, ``"mean"`` or ``"none"``.
    """
    if torch.isnan(logits).any():
        raise ValueError("NaN in classification logits")
    p = torch.sigmoid(logits)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = p * targets + (1 - p) * (1 - targets)
    loss = ce * (1 - p_t) ** gamma
    if alpha is not None:
        loss = loss * (alpha * targets + (1 - alpha) * (1 - targets))
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    return loss


def balanced_l1_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 0.5,
                     gamma: float = 1.5, reduction: str = "sum") -> torch.Tensor:
    """Balanced L1 with the regime boundary at |x| = 1.

    ``b`` is tied to ``alpha`` and ``gamma`` so value and gradient are
    continuous at the boundary; the slope beyond it is ``gamma``.
    """
    b = math.exp(gamma / alpha) - 1
    x = (pred - target).abs()
    inner = alpha / b * (b * x + 1) * torch.log(b * x + 1) - alpha * x
    outer = gamma * x + gamma / b - alpha
    loss = torch.where(x < 1, inner, outer)
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    return loss


def detection_loss(outputs, targets: Sequence[DetTargets], cfg: DetHeadConfig):
    """Focal + balanced-L1 over a batch, each normalized by the positive count.

    ``outputs`` come from :class:`DetHead`; ``targets`` hold one entry per image
    with all levels concatenated. Returns ``(cls_loss, loc_loss)``.
    """
    logits = torch.cat([o[0] for o in outputs], 1)
    deltas = torch.cat([o[1] for o in outputs], 1)
    labels = torch.stack([t.labels for t in targets])
    reg = torch.stack([t.deltas for t in targets]).to(deltas.dtype)
    valid = labels != IGNORE
    pos = labels >= 0
    num_pos = max(1, int(pos.sum()))
    onehot = torch.zeros_like(logits)
    onehot[pos] = F.one_hot(labels[pos], cfg.num_classes).to(logits.dtype)
    cls = focal_loss(logits[valid], onehot[valid], cfg.focal_alpha, cfg.focal_gamma) / num_pos
    loc = balanced_l1_loss(deltas[pos], reg[pos], cfg.bl1_alpha, cfg.bl1_gamma) / num_pos
    return cls, loc


# ---------------------------------------------------------------------------
# Decoding

def _canonical_order(boxes: torch.Tensor, scores: torch.Tensor) -> torch.Tensor:
    # descending score, ties broken by coordinates so input order never matters
    keys = np.lexsort(tuple(boxes[:, i].numpy() for i in (3, 2, 1, 0)) + (-scores.numpy(),))
    return torch.as_tensor(keys, dtype=torch.long)


def nms(boxes: torch.Tensor, scores: torch.Tensor, iou_threshold: float) -> torch.Tensor:
    """Greedy NMS; returns kept indices in canonical (score-descending) order.

    A box is suppressed when its IoU with a kept box exceeds the threshold.
    """
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)
    order = _canonical_order(boxes.detach().double(), scores.detach().double())
    overlaps = box_iou(boxes[order].double(), boxes[order].double())
    alive = torch.ones(len(order), dtype=torch.bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(i)
        alive &= overlaps[i] <= iou_threshold
        alive[i] = False
    return order[keep]


def decode_detections(outputs, anchors: Sequence[torch.Tensor], cfg: DetHeadConfig,
                      image_size: tuple[int, int], index: int = 0) -> list[Detection]:
    """Detections for one image of the batch, clipped to ``image_size`` (H, W)."""
    h, w = image_size
    all_boxes, all_scores, all_cls = [], [], []
    for (logits, deltas), anc in zip(outputs, anchors):
        scores = torch.sigmoid(logits[index].detach().double()).flatten()
        keep = torch.nonzero(scores > cfg.score_threshold).squeeze(1)
        if len(keep) > cfg.pre_nms_topk:
            keep = keep[torch.topk(scores[keep], cfg.pre_nms_topk).indices]
        a_idx, c_idx = keep // cfg.num_classes, keep % cfg.num_classes
        boxes = decode_boxes(deltas[index].detach().double()[a_idx], anc[a_idx])
        boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
        all_boxes.append(boxes)
        all_scores.append(scores[keep])
        all_cls.append(c_idx)
    boxes, scores, cls = torch.cat(all_boxes), torch.cat(all_scores), torch.cat(all_cls)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    return postprocess(boxes[ok], scores[ok], cls[ok] + 1, cfg)


def postprocess(boxes: torch.Tensor, scores: torch.Tensor, class_ids: torch.Tensor,
                cfg: DetHeadConfig) -> list[Detection]:
    """Score filter, per-class NMS and top-k on already decoded boxes."""
    keep_mask = scores >= cfg.score_threshold
    boxes, scores, class_ids = boxes[keep_mask], scores[keep_mask], class_ids[keep_mask]
    dets = []
    for c in torch.unique(class_ids).tolist():
        sel = torch.nonzero(class_ids == c).squeeze(1)
        for i in nms(boxes[sel], scores[sel], cfg.nms_iou).tolist():
            j = sel[i]
            dets.append(Detection(tuple(float(v) for v in boxes[j]), int(c), float(scores[j])))
    dets.sort(key=lambda d: (-d.score, d.class_id, d.box))
    return dets[:cfg.max_detections]
