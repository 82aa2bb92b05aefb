"""Shared encoder: residual backbone + FPN/PAFPN neck emitting pyramid features."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

# name -> (block, stem width, stage widths, stage depths, stem kernel)
BACKBONES = {
    "small": ("basic", 32, (32, 64, 128, 256), (1, 1, 1, 1), 3),
    "large": ("basic", 32, (32, 64, 128, 256), (2, 2, 3, 2), 3),
    "resnet18": ("basic", 64, (64, 128, 256, 512), (2, 2, 2, 2), 7),
    "resnet50": ("bottleneck", 64, (64, 128, 256, 512), (3, 4, 6, 3), 7),
}
NECKS = ("fpn", "pafpn")


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    backbone: str = "small"
    neck: str = "fpn"
    strides: tuple[int, ...] = (8, 16, 32)
    det_channels: int = 256
    remove_first_maxpool: bool = True
    context_enhancement: bool = True
    widths: tuple[int, ...] | None = None  # overrides the backbone's stage widths
    depths: tuple[int, ...] | None = None

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.widths is not None:
            self.widths = tuple(self.widths)
        if self.depths is not None:
            self.depths = tuple(self.depths)
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONES)}")
        if self.neck not in NECKS:
            raise ConfigError(f"unknown neck {self.neck!r}; choose from {NECKS}")
        s = self.strides
        if not s or any(b <= a for a, b in zip(s, s[1:])):
            raise ConfigError("strides must be strictly increasing")
        if any(x < 4 or x & (x - 1) for x in s):
            raise ConfigError("strides must be powers of two >= 4")
        if s[0] > 32:
            raise ConfigError("the finest stride must come from the backbone (<= 32)")
        if self.det_channels <= 0:
            raise ConfigError("det_channels must be positive")

    @property
    def max_stride(self) -> int:
        return self.strides[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("strides", "widths", "depths"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


def group_norm(ch: int) -> nn.GroupNorm:
    # at least two channels per group so 1x1 maps still normalize
    groups = math.gcd(ch, 8)
    while groups > 1 and ch // groups < 2:
        groups //= 2
    return nn.GroupNorm(groups, ch)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width
        self.conv1 = nn.Conv2d(cin, width, 3, stride, 1, bias=False)
        self.norm1 = group_norm(width)
        self.conv2 = nn.Conv2d(width, cout, 3, 1, 1, bias=False)
        self.norm2 = group_norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), group_norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.norm1 = group_norm(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride, 1, bias=False)
        self.norm2 = group_norm(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.norm3 = group_norm(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), group_norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Backbone(nn.Module):
    """Four residual stages at strides 4, 8, 16, 32.

    With the first max-pool removed the first stage downsamples instead, so
    stage strides are the same either way.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        kind, stem, widths, depths, k = BACKBONES[cfg.backbone]
        widths = cfg.widths or widths
        depths = cfg.depths or depths
        if len(widths) != 4 or len(depths) != 4:
            raise ConfigError("backbone needs exactly 4 stage widths and depths")
        block = BasicBlock if kind == "basic" else Bottleneck
        self.stem = nn.Sequential(nn.Conv2d(3, stem, k, 2, k // 2, bias=False), group_norm(stem), nn.ReLU())
        self.pool = None if cfg.remove_first_maxpool else nn.MaxPool2d(3, 2, 1)
        stages, cin = [], stem
        for i, (w, d) in enumerate(zip(widths, depths)):
            stride = 1 if (i == 0 and self.pool is not None) else 2
            blocks = []
            for j in range(d):
                blocks.append(block(cin, w, stride if j == 0 else 1))
                cin = w * block.expansion
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(w * block.expansion for w in widths)
        self.out_strides = (4, 8, 16, 32)

    def forward(self, x):
        x = self.stem(x)
        if self.pool is not None:
            x = self.pool(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs


class Neck(nn.Module):
    """FPN top-down fusion, optionally followed by a PAFPN bottom-up pass."""

    def __init__(self, in_channels, cfg: EncoderConfig):
        super().__init__()
        c = cfg.det_channels
        self.num_inner = len(in_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(ci, c, 1) for ci in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(c, c, 3, 1, 1) for _ in in_channels)
        # global context added to the coarsest lateral before the top-down pass
        self.context = nn.Conv2d(in_channels[-1], c, 1) if cfg.context_enhancement else None
        self.down = self.bu_output = None
        if cfg.neck == "pafpn":
            self.down = nn.ModuleList(nn.Conv2d(c, c, 3, 2, 1) for _ in in_channels[1:])
            self.bu_output = nn.ModuleList(nn.Conv2d(c, c, 3, 1, 1) for _ in in_channels[1:])
        n_extra = sum(1 for s in cfg.strides if s > 32)
        self.extra = nn.ModuleList(nn.Conv2d(c, c, 3, 2, 1) for _ in range(n_extra))

    def forward(self, feats):
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        if self.context is not None:
            top = feats[-1]
            lat[-1] = lat[-1] + self.context(top.mean(dim=(2, 3), keepdim=True))
        for i in range(len(lat) - 2, -1, -1):
            lat[i] = lat[i] + F.interpolate(lat[i + 1], size=lat[i].shape[-2:], mode="nearest")
        outs = [conv(x) for conv, x in zip(self.output, lat)]
        if self.down is not None:
            for i in range(1, len(outs)):
                outs[i] = self.bu_output[i - 1](outs[i] + self.down[i - 1](outs[i - 1]))
        x = outs[-1]
        for k, conv in enumerate(self.extra):
            x = conv(x if k == 0 else F.relu(x))
            outs.append(x)
        return outs


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        used = [s for s in cfg.strides if s <= 32]
        self.stage_index = [self.backbone.out_strides.index(s) for s in used]
        in_ch = [self.backbone.out_channels[i] for i in self.stage_index]
        self.neck = Neck(in_ch, cfg)

    @property
    def strides(self) -> tuple[int, ...]:
        return self.cfg.strides

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = self.backbone(x)
        return self.neck([feats[i] for i in self.stage_index])


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


def level_shapes(height: int, width: int, strides) -> list[tuple[int, int]]:
    return [(math.ceil(height / s), math.ceil(width / s)) for s in strides]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
