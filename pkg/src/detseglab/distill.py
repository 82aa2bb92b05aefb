"""Feature-imitation distillation from frozen single-task teachers."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .dataio import Dataset, Task
from .model import ModelConfig, MultiTaskNet, load_checkpoint
from .trainer import TrainConfig, TrainMode, TrainState, _seeded_model, run_training


class KDMode(str, Enum):
    MSE1 = "1mse"  # imitate the teacher of the annotated task
    MSE0 = "0mse"  # imitate the teacher of the task without annotations
    MSE2 = "2mse"  # both
    STL_KD = "stl_kd"  # single-task student, own-task teacher


@dataclass
class DistillConfig:
    mode: KDMode = KDMode.MSE2
    kd_weight: float = 1.0
    teacher_det: str | None = None
    teacher_seg: str | None = None

    def __post_init__(self):
        self.mode = KDMode(self.mode)

    def teacher_path(self, task: Task) -> str | None:
        return self.teacher_det if task is Task.DET else self.teacher_seg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


def route_kd(task_tag: Task | str, mode: KDMode | str) -> frozenset[Task]:
    """Teachers a batch annotated for ``task_tag`` imitates under ``mode``."""
    tag, mode = Task(task_tag), KDMode(mode)
    if mode in (KDMode.MSE1, KDMode.STL_KD):
        return frozenset({tag})
    if mode is KDMode.MSE0:
        return frozenset({tag.other})
    return frozenset({Task.DET, Task.SEG})


# ---------------------------------------------------------------------------
# Flattened pyramid features

@dataclass
class FlatFeatures:
    """Levels flattened and concatenated along space: ``data`` is (B, C, N)."""

    data: torch.Tensor
    shapes: tuple[tuple[int, int], ...]

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for h, w in self.shapes:
            out.append(acc)
            acc += h * w
        return out


def flatten_concat(levels: Sequence[torch.Tensor]) -> FlatFeatures:
    """Concatenate (B, C, H_l, W_l) levels, finest first, into (B, C, sum H_l W_l)."""
    chans = {f.shape[1] for f in levels}
    if len(chans) != 1:
        raise ValueError(f"levels have differing channel counts {sorted(chans)}")
    data = torch.cat([f.flatten(2) for f in levels], 2)
    return FlatFeatures(data, tuple((f.shape[2], f.shape[3]) for f in levels))


def unflatten(flat: FlatFeatures) -> list[torch.Tensor]:
    b, c, _ = flat.data.shape
    return [flat.data[:, :, o:o + h * w].reshape(b, c, h, w) for o, (h, w) in zip(flat.offsets, flat.shapes)]


class Projection(nn.Module):
    """Per-position linear map (a 1x1 convolution) from student to teacher channels."""

    def __init__(self, student_channels: int, teacher_channels: int):
        super().__init__()
        self.conv = nn.Conv1d(student_channels, teacher_channels, 1)
        if student_channels == teacher_channels:
            with torch.no_grad():
                self.conv.weight.copy_(torch.eye(student_channels)[:, :, None])
                self.conv.bias.zero_()

    def forward(self, flat: FlatFeatures) -> FlatFeatures:
        return FlatFeatures(self.conv(flat.data), flat.shapes)


def project_student(flat: FlatFeatures, projection: Projection) -> FlatFeatures:
    return projection(flat)


def kd_loss(student: FlatFeatures | torch.Tensor, teacher: FlatFeatures | torch.Tensor) -> torch.Tensor:
    """Mean squared difference over every element."""
    s = student.data if isinstance(student, FlatFeatures) else student
    t = teacher.data if isinstance(teacher, FlatFeatures) else teacher
    if s.shape != t.shape:
        raise ValueError(f"student features {tuple(s.shape)} vs teacher {tuple(t.shape)}")
    return F.mse_loss(s, t)


# ---------------------------------------------------------------------------
# Teachers and the distillation loss

class Teacher:
    """Frozen network whose flattened neck features are imitated; logs every call.

    Features are cached per image content: the teacher never changes, so an
    image seen in an earlier epoch need not be forwarded again.
    """

    def __init__(self, model: MultiTaskNet, task: Task, log: list | None = None, cache: bool = True):
        self.model = model.eval().requires_grad_(False)
        self.task = Task(task)
        self.log = log if log is not None else []
        self.cache: dict[bytes, tuple[torch.Tensor, list]] | None = {} if cache else None

    @classmethod
    def load(cls, path: str | Path, task: Task, log: list | None = None, cache: bool = True) -> "Teacher":
        model, _ = load_checkpoint(path)
        return cls(model, task, log, cache)

    @property
    def channels(self) -> int:
        return self.model.cfg.encoder.det_channels

    @torch.no_grad()
    def __call__(self, images: torch.Tensor, batch_task: Task) -> FlatFeatures:
        self.log.append((Task(batch_task), self.task))
        if self.cache is None:
            return flatten_concat(self.model.features(images))
        keys = [hashlib.blake2b(img.numpy().tobytes(), digest_size=16).digest() for img in images]
        missing = [k for k, key in enumerate(keys) if key not in self.cache]
        if missing:
            flat = flatten_concat(self.model.features(images[missing]))
            for row, k in enumerate(missing):
                self.cache[keys[k]] = (flat.data[row], flat.shapes)
        rows = [self.cache[key] for key in keys]
        return FlatFeatures(torch.stack([r[0] for r in rows]), rows[0][1])


class FeatureDistiller(nn.Module):
    """Holds one projection per teacher and computes the routed KD term."""

    def __init__(self, teachers: Mapping[Task, Teacher], student_channels: int, cfg: DistillConfig):
        super().__init__()
        self.cfg = cfg
        self.teachers = dict(teachers)
        self.projections = nn.ModuleDict(
            {t.value: Projection(student_channels, teacher.channels) for t, teacher in self.teachers.items()})

    def __call__(self, task: Task, images: torch.Tensor, out: dict) -> torch.Tensor | None:
        if self.cfg.kd_weight == 0:
            return None
        student = flatten_concat(out["features"])
        total = 0.0
        for t in sorted(route_kd(task, self.cfg.mode), key=lambda t: t.value):
            if t not in self.teachers:
                raise ValueError(f"{self.cfg.mode.value} on a {Task(task).value} batch needs the "
                                 f"{t.value} teacher, which is not loaded")
            target = self.teachers[t](images, task)
            if target.shapes != student.shapes:
                raise ValueError(f"teacher grid {target.shapes} != student grid {student.shapes}")
            total = total + kd_loss(self.projections[t.value](student), target)
        return self.cfg.kd_weight * total


def load_teachers(cfg: DistillConfig, tasks: Sequence[Task], log: list | None = None) -> dict[Task, Teacher]:
    """Load every teacher the routing can ask for when training ``tasks``."""
    log = [] if log is None else log
    needed = set().union(*(route_kd(t, cfg.mode) for t in tasks))
    teachers = {}
    for t in sorted(needed, key=lambda t: t.value):
        path = cfg.teacher_path(t)
        if path is None:
            raise ValueError(f"mode {cfg.mode.value} needs a {t.value} teacher checkpoint")
        teachers[t] = Teacher.load(path, t, log)
    return teachers


def train_student(model_cfg: ModelConfig, det_data: Dataset | None, seg_data: Dataset | None,
                  cfg: TrainConfig, distill_cfg: DistillConfig, val: Dataset | None = None,
                  teachers: Mapping[Task, Teacher] | None = None, **kw) -> TrainState:
    """Train a student with task loss + ``kd_weight`` * routed KD losses.

    Multi-task students use the per-iteration alternating loop; with
    ``STL_KD`` exactly one of ``det_data``/``seg_data`` is given.
    """
    data = {t: d for t, d in ((Task.DET, det_data), (Task.SEG, seg_data)) if d is not None}
    if distill_cfg.mode is KDMode.STL_KD:
        if len(data) != 1:
            raise ValueError("stl_kd trains a single-task student; pass exactly one subset")
        (task,) = data
        cfg = TrainConfig(**{**cfg.to_dict(), "mode": f"single_{task.value}"})
    elif cfg.mode is not TrainMode.MT_ITERATION:
        raise ValueError("multi-task students train with mt_iteration")
    if teachers is None:
        teachers = load_teachers(distill_cfg, list(data))
    model = _seeded_model(model_cfg, list(data), cfg.seed)
    distiller = FeatureDistiller(teachers, model_cfg.encoder.det_channels, distill_cfg)
    # registered on the student so the optimizer and checkpoints pick the projections up
    model.kd_projections = distiller.projections
    _check_grids(model, teachers, data)
    return run_training(model, cfg, data, val, extra_loss=distiller, **kw)


def _check_grids(student: MultiTaskNet, teachers: Mapping[Task, Teacher], data: Mapping[Task, Dataset]) -> None:
    sample = next(iter(next(iter(data.values()))))
    x = torch.zeros(1, 3, sample.height, sample.width)
    with torch.no_grad():
        s = flatten_concat(student.features(x)).shapes
        for t, teacher in teachers.items():
            shapes = flatten_concat(teacher.model.features(x)).shapes
            if shapes != s:
                raise ValueError(f"{t.value} teacher grid {shapes} != student grid {s}")
