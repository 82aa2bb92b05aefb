"""Pyramid-aggregation semantic segmentation head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import IGNORE_LABEL
from .encoder import group_norm


@dataclass
class SegHeadConfig:
    num_classes: int = 4
    seg_channels: int = 128
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if self.seg_channels <= 0:
            raise ValueError("seg_channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must count background plus at least one class")

    def to_dict(self) -> dict:
        return asdict(self)


class SegHead(nn.Module):
    """Each level goes through (conv, GN, ReLU, 2x upsample) until stride 4; the
    results are summed, classified by a 1x1 conv and upsampled 4x."""

    out_stride = 4

    def __init__(self, in_channels: int, strides: Sequence[int], cfg: SegHeadConfig):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.strides = tuple(strides)
        c = cfg.seg_channels
        chains = []
        for s in self.strides:
            n_up = int(math.log2(s // self.out_stride))
            layers, cin = [], in_channels
            for _ in range(max(n_up, 1)):
                layers.append(nn.Sequential(nn.Conv2d(cin, c, 3, 1, 1, bias=False), group_norm(c), nn.ReLU()))
                cin = c
            chains.append(nn.ModuleList(layers))
        self.chains = nn.ModuleList(chains)
        self.classifier = nn.Conv2d(c, cfg.num_classes, 1)

    def chain_lengths(self) -> list[int]:
        return [int(math.log2(s // self.out_stride)) for s in self.strides]

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        fused = None
        for f, chain, s in zip(feats, self.chains, self.strides):
            if f.shape[1] != self.in_channels:
                raise ValueError(f"segmentation head expects {self.in_channels} channels, got {f.shape[1]}")
            x = f
            for layer in chain:
                x = layer(x)
                if s > self.out_stride:
                    x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            fused = x if fused is None else fused + x
        logits = self.classifier(fused)
        return F.interpolate(logits, scale_factor=self.out_stride, mode="bilinear", align_corners=False)


def seg_loss(logits: torch.Tensor, mask: torch.Tensor, ignore_label: int = IGNORE_LABEL) -> torch.Tensor:
    """Mean softmax cross-entropy over non-ignored pixels."""
    if logits.shape[-2:] != mask.shape[-2:]:
        raise ValueError(f"logits {tuple(logits.shape)} and mask {tuple(mask.shape)} disagree")
    mask = mask.long()
    if not (mask != ignore_label).any():
        raise ValueError("every pixel is ignore-labelled")
    return F.cross_entropy(logits, mask, ignore_index=ignore_label)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the class axis (first axis for C x H x W input)."""
    arr = logits.detach().cpu().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    # np.argmax returns the first maximum, so ties go to the lowest class id
    return np.argmax(arr, axis=-3).astype(np.uint8)
