"""Grad-CAM heatmaps over neck features, plus PNG and composite figure output."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import Task
from .model import MultiTaskNet


@dataclass(frozen=True)
class CamTarget:
    """What the heatmap explains.

    Detection: the classification logit of ``class_id`` at flat anchor index
    ``anchor`` (levels concatenated finest first). Unset fields pick the
    top-scoring (anchor, class) pair, i.e. the best decoded detection.
    Segmentation: the logit of ``class_id`` summed over all pixels.
    """

    task: Task
    class_id: int | None = None
    anchor: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "task", Task(self.task))
        if self.task is Task.SEG and self.class_id is None:
            raise ValueError("a segmentation target needs class_id")

    @classmethod
    def parse(cls, text: str) -> "CamTarget":
        """``det``, ``det:<class>``, ``det:<class>:<anchor>`` or ``seg:<class>``."""
        parts = text.split(":")
        ints = [int(p) for p in parts[1:]]
        return cls(Task(parts[0]), *ints)


def cam_from_activations(activations: Sequence[torch.Tensor], score: torch.Tensor,
                         size: tuple[int, int]) -> np.ndarray:
    """Grad-CAM of a scalar ``score`` w.r.t. (1, C, h, w) activation maps.

    Channel weights are spatially averaged gradients; each level's rectified
    weighted sum is bilinearly resized to ``size`` and the levels are averaged.
    The result is divided by its maximum, or is all zeros if nothing is positive.
    """
    grads = torch.autograd.grad(score, list(activations), allow_unused=True)
    maps = []
    for a, g in zip(activations, grads):
        if g is None:
            g = torch.zeros_like(a)
        w = g.mean(dim=(-2, -1), keepdim=True)
        cam = F.relu((w * a).sum(dim=1, keepdim=True))
        maps.append(F.interpolate(cam, size=size, mode="bilinear", align_corners=False))
    cam = torch.stack(maps).mean(0)[0, 0].detach().double()
    cam = cam.clamp_min(0)  # bilinear resizing keeps values >= 0; guard rounding anyway
    peak = float(cam.max())
    if not peak > 0:
        return np.zeros(size, np.float64)
    return (cam / peak).clamp(0, 1).cpu().numpy()


def target_score(model: MultiTaskNet, feats: Sequence[torch.Tensor], target: CamTarget,
                 image_size: tuple[int, int]) -> torch.Tensor:
    if target.task is Task.DET:
        if model.det_head is None:
            raise ValueError("model has no detection head")
        k = model.cfg.det.num_classes
        if target.class_id is not None and not 0 <= target.class_id < k:
            raise ValueError(f"class {target.class_id} not in detection head (0..{k - 1})")
        logits = torch.cat([lg for lg, _ in model.det_head(list(feats))], 1)[0]  # (N, K)
        if target.anchor is not None and not 0 <= target.anchor < logits.shape[0]:
            raise ValueError(f"anchor {target.anchor} out of range ({logits.shape[0]} anchors)")
        if target.anchor is None:
            cols = logits if target.class_id is None else logits[:, target.class_id:target.class_id + 1]
            flat = int(torch.argmax(cols.detach()))
            a, c = divmod(flat, cols.shape[1])
            c = c if target.class_id is None else target.class_id
        else:
            a = target.anchor
            c = target.class_id if target.class_id is not None else int(torch.argmax(logits[a].detach()))
        return logits[a, c]
    if model.seg_head is None:
        raise ValueError("model has no segmentation head")
    k = model.cfg.seg.num_classes
    if not 0 <= target.class_id < k:
        raise ValueError(f"class {target.class_id} not in segmentation head (0..{k - 1})")
    h, w = image_size
    return model.seg_head(list(feats))[0, target.class_id, :h, :w].sum()


def grad_cam(model: MultiTaskNet, image: torch.Tensor | np.ndarray, target: CamTarget,
             levels: Sequence[int] = (0,)) -> np.ndarray:
    """Heatmap in [0, 1] of the input's size for one (3, H, W) or (H, W, 3) image.

    ``levels`` indexes neck outputs, finest first. Parameters are not touched.
    """
    x = torch.as_tensor(np.asarray(image, np.float32) if isinstance(image, np.ndarray) else image)
    if x.dim() == 3 and x.shape[-1] == 3 and x.shape[0] != 3:
        x = x.permute(2, 0, 1)
    x = x.float()[None]
    levels = list(levels)
    n_levels = len(model.strides)
    if not levels or any(not 0 <= l < n_levels for l in levels):
        raise ValueError(f"levels {levels} outside 0..{n_levels - 1}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.features(x)
        feats = [f.detach().requires_grad_(True) for f in feats]
        with torch.enable_grad():
            score = target_score(model, feats, target, tuple(x.shape[-2:]))
            padded = cam_from_activations([feats[l] for l in levels], score, tuple(feats[0].shape[-2:]))
    finally:
        model.train(was_training)
    # levels were resized to the finest grid; map that grid (padded input) onto the image
    m = model.cfg.encoder.max_stride
    h, w = x.shape[-2:]
    ph, pw = -(-h // m) * m, -(-w // m) * m
    full = F.interpolate(torch.from_numpy(padded)[None, None], size=(ph, pw), mode="bilinear",
                         align_corners=False)[0, 0, :h, :w].clamp_min(0)
    peak = float(full.max())
    return (full / peak).numpy() if peak > 0 else np.zeros((h, w), np.float64)


# ---------------------------------------------------------------------------
# Figures

def heatmap_rgb(cam: np.ndarray, cmap: str = "jet") -> np.ndarray:
    from matplotlib import colormaps
    return (colormaps[cmap](np.clip(cam, 0, 1))[..., :3] * 255).astype(np.uint8)


def save_heatmap(cam: np.ndarray, path: str | Path) -> Path:
    from PIL import Image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(heatmap_rgb(cam)).save(path)
    return path


def overlay(image: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    img = np.clip(np.asarray(image, np.float64), 0, 1)
    return np.clip((1 - alpha) * img + alpha * heatmap_rgb(cam) / 255.0, 0, 1)


def save_composite(image: np.ndarray, cams: Mapping[str, np.ndarray], path: str | Path,
                   title: str | None = None) -> Path:
    """Input image followed by one overlay per labelled heatmap, side by side."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 1 + len(cams)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.8), squeeze=False)
    axes = axes[0]
    axes[0].imshow(np.clip(image, 0, 1))
    axes[0].set_title("input")
    for ax, (label, cam) in zip(axes[1:], cams.items()):
        ax.imshow(overlay(image, cam))
        ax.set_title(label)
    for ax in axes:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
