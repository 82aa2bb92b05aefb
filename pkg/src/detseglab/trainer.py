"""Single-task, finetuning and multi-task training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import dataio
from .dataio import Dataset, PartialSplit, ScheduleMode, Task
from .dethead import DetTargets, detection_loss, match_anchors
from .evalmetrics import DetRecord, compute_map, compute_miou, gt_records
from .model import (MultiTaskNet, ModelConfig, freeze, load_encoder_from, read_checkpoint,
                    save_checkpoint, trainable_parameters)
from .seghead import seg_loss

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    SINGLE_DET = "single_det"
    SINGLE_SEG = "single_seg"
    MT_EPOCH = "mt_epoch"
    MT_ITERATION = "mt_iteration"
    MT_FULL = "mt_full"  # both losses on fully annotated images
    FINETUNE_HEAD = "finetune_head"
    FINETUNE_FULL = "finetune_full"


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.MT_ITERATION
    epochs: int = 30
    lr: float = 5e-3
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 10.0
    cosine: bool = True
    warmup_iters: int = 0
    det_weight: float = 1.0
    seg_weight: float = 1.0
    hflip: bool = False
    seed: int = 0
    eval_every: int = 0  # 0: evaluate after the last epoch only

    def __post_init__(self):
        self.mode = TrainMode(self.mode)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


# ---------------------------------------------------------------------------
# Data held as tensors

class TaskData:
    """Images (and targets) of one dataset stacked into tensors, indexed by id."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.index = {s.id: i for i, s in enumerate(dataset)}
        self.images = torch.from_numpy(np.stack([s.image for s in dataset])).permute(0, 3, 1, 2).contiguous()
        self.masks = None
        if all(s.mask is not None for s in dataset):
            self.masks = torch.from_numpy(np.stack([s.mask for s in dataset])).long()
        self._targets: dict[tuple[str, bool], DetTargets] = {}

    @property
    def ids(self) -> list[str]:
        return self.dataset.ids

    def batch(self, ids: Sequence[str], flip: bool = False):
        idx = torch.tensor([self.index[i] for i in ids])
        images = self.images[idx]
        masks = self.masks[idx] if self.masks is not None else None
        if flip:
            images = images.flip(-1)
            masks = masks.flip(-1) if masks is not None else None
        return images, masks

    def det_targets(self, ids: Sequence[str], model: MultiTaskNet, flip: bool = False) -> list[DetTargets]:
        h, w = self.images.shape[-2:]
        anchors = torch.cat(model.anchors(h, w))
        out = []
        for i in ids:
            key = (i, flip)
            if key not in self._targets:
                s = self.dataset[i]
                if s.boxes is None:
                    raise ValueError(f"{i} has no box annotation")
                boxes = torch.from_numpy(s.boxes.astype(np.float64))
                if flip:
                    boxes = torch.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], 1)
                self._targets[key] = match_anchors(anchors, boxes, torch.from_numpy(s.labels), model.cfg.det)
            out.append(self._targets[key])
        return out


def _check_task(data: Dataset, task: Task) -> None:
    for s in data:
        if s.task_tag is not None and s.task_tag is not task:
            raise ValueError(f"{s.id} is tagged {s.task_tag.value}, expected {task.value}")
        if task is Task.DET and s.boxes is None:
            raise ValueError(f"{s.id} lacks boxes for detection training")
        if task is Task.SEG and s.mask is None:
            raise ValueError(f"{s.id} lacks a mask for segmentation training")


# ---------------------------------------------------------------------------
# State

@dataclass
class TrainState:
    model: MultiTaskNet
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    epoch: int = 0  # completed epochs
    iteration: int = 0  # completed parameter updates
    history: list[dict] = field(default_factory=list)
    running: dict[str, float] = field(default_factory=dict)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        """Checkpoint model, momentum buffers and counters into one file."""
        names = {id(p): n for n, p in self.model.named_parameters()}
        tensors = {}
        for group in self.optimizer.param_groups:
            for p in group["params"]:
                buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    tensors[f"optim.{names[id(p)]}"] = buf
        meta = {"train_config": self.config.to_dict(), "epoch": self.epoch, "iteration": self.iteration,
                "history": self.history, "running": self.running,
                "frozen_parts": sorted(self.model.frozen_parts)}
        meta.update(extra or {})
        save_checkpoint(self.model, path, extra=meta, tensors=tensors)


def build_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(trainable_parameters(model) or [nn.Parameter(torch.zeros(1))], lr=cfg.lr,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def load_train_state(path: str | Path) -> TrainState:
    from .model import load_checkpoint

    model, info = load_checkpoint(path)
    extra = info["extra"]
    cfg = TrainConfig(**extra["train_config"])
    freeze(model, extra.get("frozen_parts", ()))
    opt = build_optimizer(model, cfg)
    params = dict(model.named_parameters())
    for k, v in info["other_tensors"].items():
        if k.startswith("optim."):
            opt.state[params[k[len("optim."):]]]["momentum_buffer"] = v.clone()
    return TrainState(model, cfg, opt, extra["epoch"], extra["iteration"], extra["history"],
                      extra.get("running", {}))


# ---------------------------------------------------------------------------
# Loss computation and the update step

ExtraLoss = Callable[[Task, torch.Tensor, dict], torch.Tensor]


def task_loss(model: MultiTaskNet, task: Task, data: TaskData, ids: Sequence[str], cfg: TrainConfig,
              flip: bool = False, extra_loss: ExtraLoss | None = None, tasks: Sequence[Task] | None = None):
    """Forward one mini-batch and return ``(loss, parts)``.

    ``tasks`` defaults to ``[task]``; MT_FULL passes both so one forward feeds
    both heads.
    """
    tasks = list(tasks or [task])
    images, masks = data.batch(ids, flip)
    out = model(images, tasks)
    parts, loss = {}, 0.0
    if Task.DET in tasks:
        cls, loc = detection_loss(out["det"], data.det_targets(ids, model, flip), model.cfg.det)
        parts["det_cls"], parts["det_loc"] = cls.item(), loc.item()
        loss = loss + cfg.det_weight * (cls + loc)
    if Task.SEG in tasks:
        sl = seg_loss(out["seg"], masks, model.cfg.seg.ignore_label)
        parts["seg"] = sl.item()
        loss = loss + cfg.seg_weight * sl
    if extra_loss is not None:
        kd = extra_loss(task, images, out)
        if kd is not None:
            parts["kd"] = kd.item()
            loss = loss + kd
    return loss, parts


def _lr_at(cfg: TrainConfig, it: int, total: int) -> float:
    lr = cfg.lr
    if cfg.cosine and total > 0:
        lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * min(it, total) / total))
    if cfg.warmup_iters and it < cfg.warmup_iters:
        lr *= (it + 1) / cfg.warmup_iters
    return lr


def apply_update(state: TrainState, total_iters: int) -> None:
    params = trainable_parameters(state.model)
    if state.config.grad_clip and params:
        nn.utils.clip_grad_norm_(params, state.config.grad_clip)
    lr = _lr_at(state.config, state.iteration, total_iters)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.step()
    state.iteration += 1


def accumulate_iteration(state: TrainState, batches: Sequence[tuple[Task, TaskData, Sequence[str]]],
                         flip: bool = False, extra_loss: ExtraLoss | None = None) -> dict:
    """Forward/backward each (task, batch) in turn, accumulating gradients.

    Heads only see their own batch; encoder gradients add up. No update is
    applied here.
    """
    state.optimizer.zero_grad(set_to_none=True)
    parts = {}
    for task, data, ids in batches:
        loss, p = task_loss(state.model, task, data, ids, state.config, flip, extra_loss)
        if loss.requires_grad:
            loss.backward()
        parts.update(p)
    return parts


# ---------------------------------------------------------------------------
# Epoch plans

def _epoch_plan(cfg: TrainConfig, data: dict[Task, TaskData], epoch: int, split: PartialSplit | None):
    """Lists of update cycles; each cycle is a list of (task, ids)."""
    b, seed = cfg.batch_size, cfg.seed
    mode = cfg.mode
    if mode in (TrainMode.SINGLE_DET, TrainMode.SINGLE_SEG, TrainMode.FINETUNE_HEAD, TrainMode.FINETUNE_FULL,
                TrainMode.MT_FULL):
        (task, d), = data.items()
        return [[(task, ids)] for ids in dataio.single_task_batches(d.ids, b, seed, epoch)]
    if mode is TrainMode.MT_ITERATION:
        sched = dataio.make_epoch_schedule(split, b, ScheduleMode.ITERATION, seed, epoch)
        its = list(sched.iterations)
        return [[its[k], its[k + 1]] for k in range(0, len(its), 2)]
    # MT_EPOCH: training epoch e is one task block of schedule epoch e // 2
    sched = dataio.make_epoch_schedule(split, b, ScheduleMode.EPOCH, seed, epoch // 2)
    first = sched.iterations[0][0]
    task = first if epoch % 2 == 0 else first.other
    return [[(t, ids)] for t, ids in sched.iterations if t is task]


def iterations_per_epoch(cfg: TrainConfig, sizes: dict[Task, int], epoch: int = 0) -> int:
    b = cfg.batch_size
    if cfg.mode is TrainMode.MT_ITERATION:
        return math.ceil(max(sizes.values()) / b)
    if cfg.mode is TrainMode.MT_EPOCH:
        first = Task.DET if (epoch // 2) % 2 == 0 else Task.SEG
        task = first if epoch % 2 == 0 else first.other
        return math.ceil(sizes[task] / b)
    return math.ceil(next(iter(sizes.values())) / b)


# ---------------------------------------------------------------------------
# Main loop

EpochCallback = Callable[[TrainState, dict], None]


def run_training(model: MultiTaskNet, cfg: TrainConfig, data: dict[Task, Dataset],
                 val: Dataset | None = None, extra_loss: ExtraLoss | None = None,
                 state: TrainState | None = None, on_epoch_end: EpochCallback | None = None,
                 on_iteration: Callable[[TrainState, list], None] | None = None) -> TrainState:
    """Shared loop behind every training mode.

    ``data`` maps each task to its (partially annotated) subset; MT_FULL uses a
    single fully annotated set under ``Task.DET``.
    """
    torch.use_deterministic_algorithms(True, warn_only=True)
    multi = cfg.mode in (TrainMode.MT_EPOCH, TrainMode.MT_ITERATION)
    if multi and set(data) != {Task.DET, Task.SEG}:
        raise ValueError(f"{cfg.mode.value} needs both a detection and a segmentation subset")
    for task, ds in data.items():
        if cfg.mode is not TrainMode.MT_FULL:
            _check_task(ds, task)
    tensors = {t: TaskData(d) for t, d in data.items()}
    split = None
    if multi:
        split = PartialSplit(tuple(data[Task.DET].ids), tuple(data[Task.SEG].ids), cfg.seed)
    sizes = {t: len(d) for t, d in data.items()}
    total = sum(iterations_per_epoch(cfg, sizes, e) for e in range(cfg.epochs))
    if state is None:
        state = TrainState(model, cfg, build_optimizer(model, cfg))
    model.train()
    for epoch in range(state.epoch, cfg.epochs):
        t0 = time.perf_counter()
        sums: dict[str, list[float]] = {}
        for k, cycle in enumerate(_epoch_plan(cfg, tensors, epoch, split)):
            flip = bool(cfg.hflip and np.random.default_rng([cfg.seed, epoch, k, 7]).integers(2))
            if cfg.mode is TrainMode.MT_FULL:
                (task, ids), = cycle
                state.optimizer.zero_grad(set_to_none=True)
                loss, parts = task_loss(model, task, tensors[task], ids, cfg, flip, extra_loss,
                                        tasks=(Task.DET, Task.SEG))
                loss.backward()
            else:
                parts = accumulate_iteration(state, [(t, tensors[t], ids) for t, ids in cycle], flip,
                                             extra_loss)
            if on_iteration is not None:
                on_iteration(state, cycle)
            apply_update(state, total)
            for name, v in parts.items():
                sums.setdefault(name, []).append(v)
        state.epoch = epoch + 1
        record = {"epoch": state.epoch, "losses": {k: float(np.mean(v)) for k, v in sums.items()},
                  "seconds": round(time.perf_counter() - t0, 3)}
        state.running = record["losses"]
        last = state.epoch == cfg.epochs
        if val is not None and (last or (cfg.eval_every and state.epoch % cfg.eval_every == 0)):
            record.update(evaluate(model, val))
        state.history.append(record)
        log.info("epoch %d %s", state.epoch, record)
        if on_epoch_end is not None:
            on_epoch_end(state, record)
    return state


def _seeded_model(model_cfg: ModelConfig, tasks, seed: int) -> MultiTaskNet:
    torch.manual_seed(seed)
    return MultiTaskNet(model_cfg, tasks)


def train_single(data: Dataset, task: Task | str, model_cfg: ModelConfig, cfg: TrainConfig,
                 val: Dataset | None = None, **kw) -> TrainState:
    """Encoder plus one head trained on one task's subset."""
    task = Task(task)
    model = _seeded_model(model_cfg, [task], cfg.seed)
    return run_training(model, cfg, {task: data}, val, **kw)


def train_multitask(det_data: Dataset, seg_data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                    val: Dataset | None = None, **kw) -> TrainState:
    """Alternating-task training on a partial split (MT_EPOCH or MT_ITERATION)."""
    if cfg.mode not in (TrainMode.MT_EPOCH, TrainMode.MT_ITERATION):
        raise ValueError(f"train_multitask needs an alternating mode, got {cfg.mode.value}")
    model = _seeded_model(model_cfg, [Task.DET, Task.SEG], cfg.seed)
    return run_training(model, cfg, {Task.DET: det_data, Task.SEG: seg_data}, val, **kw)


def train_full(data: Dataset, model_cfg: ModelConfig, cfg: TrainConfig, val: Dataset | None = None,
               **kw) -> TrainState:
    """Both losses summed per batch on fully annotated images."""
    model = _seeded_model(model_cfg, [Task.DET, Task.SEG], cfg.seed)
    return run_training(model, cfg, {Task.DET: data}, val, **kw)


def finetune(checkpoint: str | Path, data: Dataset, task: Task | str, freeze_encoder: bool,
             model_cfg: ModelConfig, cfg: TrainConfig, val: Dataset | None = None, **kw) -> TrainState:
    """Fresh ``task`` head on an encoder pretrained for the other task."""
    task = Task(task)
    _, info = read_checkpoint(checkpoint)
    if task.other.value not in info["tasks"]:
        raise ValueError(f"{checkpoint} was trained for {info['tasks']}, not {task.other.value}")
    model = _seeded_model(model_cfg, [task], cfg.seed)
    load_encoder_from(model, checkpoint)
    if freeze_encoder:
        freeze(model, {"backbone", "neck"})
    return run_training(model, cfg, {task: data}, val, **kw)


# ---------------------------------------------------------------------------
# Evaluation

def predict_dataset(model: MultiTaskNet, dataset: Dataset, batch_size: int = 32):
    """Detections (as records) and predicted masks for every sample."""
    data = TaskData(dataset)
    dets, masks = [], []
    ids = dataset.ids
    for k in range(0, len(ids), batch_size):
        chunk = ids[k:k + batch_size]
        images, _ = data.batch(chunk)
        for sid, r in zip(chunk, model.predict(images)):
            for d in r.get("detections", ()):
                dets.append(DetRecord(sid, d.box, d.class_id, d.score))
            if "mask" in r:
                masks.append(r["mask"])
    return dets, masks


def evaluate(model: MultiTaskNet, val: Dataset, batch_size: int = 32) -> dict:
    """mAP/AP50 for a detection head, mIoU for a segmentation head (0-100 scale)."""
    dets, masks = predict_dataset(model, val, batch_size)
    out = {}
    if model.det_head is not None:
        res = compute_map(dets, gt_records(val))
        out.update(mAP=res.map, AP50=res.ap50)
    if model.seg_head is not None:
        gts = [s.mask for s in val]
        out["mIoU"] = compute_miou(masks, gts, model.cfg.seg.num_classes, model.cfg.seg.ignore_label).miou
    return out


def evaluate_checkpoint(path: str | Path, val: Dataset) -> dict:
    from .model import load_checkpoint

    model, _ = load_checkpoint(path)
    return evaluate(model, val)
