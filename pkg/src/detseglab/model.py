"""Encoder plus optional detection/segmentation heads, freezing and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file
from torch import nn

from .dataio import Task
from .dethead import DetHead, DetHeadConfig, Detection, decode_detections, generate_anchors
from .encoder import ConfigError, Encoder, EncoderConfig, level_shapes, pad_to_multiple
from .seghead import SegHead, SegHeadConfig, predict_mask

PARTS = ("backbone", "neck", "det_head", "seg_head")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    det: DetHeadConfig = field(default_factory=DetHeadConfig)
    seg: SegHeadConfig = field(default_factory=SegHeadConfig)

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "det": self.det.to_dict(), "seg": self.seg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d.get("encoder", {})), DetHeadConfig(**d.get("det", {})),
                   SegHeadConfig(**d.get("seg", {})))


class MultiTaskNet(nn.Module):
    """Shared encoder with a head per requested task.

    Inputs are zero-padded to a multiple of the coarsest stride; segmentation
    logits are cropped back to the input size.
    """

    def __init__(self, cfg: ModelConfig, tasks: Iterable[Task | str] = (Task.DET, Task.SEG)):
        super().__init__()
        self.cfg = cfg
        self.tasks = tuple(sorted({Task(t) for t in tasks}, key=lambda t: t.value))
        self.encoder = Encoder(cfg.encoder)
        c = cfg.encoder.det_channels
        self.det_head = DetHead(c, cfg.det) if Task.DET in self.tasks else None
        self.seg_head = SegHead(c, cfg.encoder.strides, cfg.seg) if Task.SEG in self.tasks else None
        self.frozen_parts: frozenset[str] = frozenset()
        self._anchor_cache: dict[tuple[int, int], list[torch.Tensor]] = {}

    @property
    def strides(self):
        return self.cfg.encoder.strides

    def part(self, name: str) -> nn.Module | None:
        if name not in PARTS:
            raise ValueError(f"unknown part {name!r}; choose from {PARTS}")
        if name in ("backbone", "neck"):
            return getattr(self.encoder, name)
        return getattr(self, name)

    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.encoder(pad_to_multiple(images, self.cfg.encoder.max_stride))

    def forward(self, images: torch.Tensor, tasks: Iterable[Task | str] | None = None) -> dict:
        tasks = self.tasks if tasks is None else tuple(Task(t) for t in tasks)
        feats = self.features(images)
        out = {"features": feats}
        if Task.DET in tasks:
            out["det"] = self.det_head(feats)
        if Task.SEG in tasks:
            h, w = images.shape[-2:]
            out["seg"] = self.seg_head(feats)[..., :h, :w]
        return out

    def anchors(self, height: int, width: int) -> list[torch.Tensor]:
        """Anchors for the padded grid of an ``height x width`` input."""
        m = self.cfg.encoder.max_stride
        key = (-(-height // m) * m, -(-width // m) * m)
        if key not in self._anchor_cache:
            shapes = level_shapes(*key, self.strides)
            self._anchor_cache[key] = generate_anchors(shapes, self.strides, self.cfg.det)
        return self._anchor_cache[key]

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> list[dict]:
        """Decoded detections and argmax masks per image (eval-mode forward)."""
        was_training = self.training
        self.eval()
        out = self(images)
        self.train(was_training)
        h, w = images.shape[-2:]
        results = []
        for i in range(images.shape[0]):
            r = {}
            if "det" in out:
                r["detections"] = decode_detections(out["det"], self.anchors(h, w), self.cfg.det, (h, w), i)
            if "seg" in out:
                r["mask"] = predict_mask(out["seg"][i])
            results.append(r)
        return results


def freeze(model: MultiTaskNet, parts: Iterable[str]) -> MultiTaskNet:
    """Exclude the named parts from gradient updates (others become trainable)."""
    parts = frozenset(parts)
    for name in parts:
        model.part(name)  # validates the name
    for name in PARTS:
        module = model.part(name)
        if module is not None:
            module.requires_grad_(name not in parts)
    model.frozen_parts = parts
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


# ---------------------------------------------------------------------------
# Checkpoints: safetensors file of named tensors + JSON metadata

def save_checkpoint(model: MultiTaskNet, path: str | Path, extra: dict | None = None,
                    tensors: dict[str, torch.Tensor] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    for k, v in (tensors or {}).items():
        state[k] = v.detach().clone().contiguous()
    meta = {"config": json.dumps(model.cfg.to_dict(), sort_keys=True),
            "tasks": json.dumps([t.value for t in model.tasks])}
    if extra:
        meta["extra"] = json.dumps(extra, sort_keys=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(state, str(tmp), metadata=meta)
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        for k in f.keys():
            tensors[k] = f.get_tensor(k)
    info = {"config": json.loads(meta["config"]), "tasks": json.loads(meta.get("tasks", "[]")),
            "extra": json.loads(meta.get("extra", "{}"))}
    return tensors, info


def load_checkpoint(path: str | Path) -> tuple[MultiTaskNet, dict]:
    tensors, info = read_checkpoint(path)
    model = MultiTaskNet(ModelConfig.from_dict(info["config"]), info["tasks"])
    model_keys = set(model.state_dict())
    model.load_state_dict({k: v for k, v in tensors.items() if k in model_keys})
    info["other_tensors"] = {k: v for k, v in tensors.items() if k not in model_keys}
    return model, info


def load_encoder_from(model: MultiTaskNet, path: str | Path) -> None:
    """Copy encoder weights from a checkpoint; the architectures must agree."""
    tensors, info = read_checkpoint(path)
    if info["config"]["encoder"] != model.cfg.encoder.to_dict():
        raise ConfigError(f"{path}: encoder config {info['config']['encoder']} does not match "
                          f"{model.cfg.encoder.to_dict()}")
    enc = {k[len("encoder."):]: v for k, v in tensors.items() if k.startswith("encoder.")}
    model.encoder.load_state_dict(enc)


def state_fingerprint(module: nn.Module, prefix: str = "") -> dict[str, bytes]:
    """Raw bytes of every tensor under ``prefix``; for bit-exact comparisons."""
    return {k: v.detach().cpu().numpy().tobytes() for k, v in module.state_dict().items()
            if k.startswith(prefix)}
