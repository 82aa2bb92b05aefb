"""Desk-scale synthetic experiments: STL vs MTL, distillation and head-only finetuning.

Every run is keyed by name and cached under a work directory (metrics JSON
plus checkpoint), so several comparisons can share the same trained models.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataio import Dataset, Task, apply_split, generate_synthetic, split_partial
from .distill import DistillConfig, KDMode, train_student
from .dethead import DetHeadConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .seghead import SegHeadConfig
from .trainer import TrainConfig, TrainMode, finetune, train_multitask, train_single

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskProtocol:
    """400 synthetic images split 200/200, 30 epochs, small encoder."""

    n_train: int = 400
    n_val: int = 100
    data_seed_base: int = 1000
    val_seed: int = 99999
    epochs: int = 30
    lr: float = 0.02
    batch_size: int = 8
    warmup_iters: int = 50
    anchor_scales: tuple[float, ...] = (0.7, 1.0, 1.4)
    student_widths: tuple[int, ...] = (16, 32, 64, 128)
    student_channels: int = 64
    teacher_backbone: str = "large"
    teacher_widths: tuple[int, ...] = (32, 64, 128, 256)
    teacher_channels: int = 128
    teacher_epochs: int = 30
    kd_weight: float = 1.0

    def model_config(self, teacher: bool = False) -> ModelConfig:
        if teacher:
            enc = EncoderConfig(backbone=self.teacher_backbone, widths=self.teacher_widths,
                                det_channels=self.teacher_channels)
            seg_c = self.teacher_channels // 2
        else:
            enc = EncoderConfig(widths=self.student_widths, det_channels=self.student_channels)
            seg_c = self.student_channels // 2
        return ModelConfig(enc, DetHeadConfig(num_classes=3, anchor_scales=self.anchor_scales),
                           SegHeadConfig(num_classes=4, seg_channels=seg_c))

    def train_config(self, mode: TrainMode | str, seed: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(mode=mode, epochs=epochs or self.epochs, lr=self.lr, batch_size=self.batch_size,
                           warmup_iters=self.warmup_iters, seed=seed)

    def data(self, seed: int) -> tuple[Dataset, Dataset, Dataset]:
        return _desk_data(self.n_train, self.n_val, self.data_seed_base + seed, self.val_seed, seed)


@lru_cache(maxsize=8)
def _desk_data(n_train: int, n_val: int, train_seed: int, val_seed: int, split_seed: int):
    train = generate_synthetic(n_train, seed=train_seed)
    val = generate_synthetic(n_val, seed=val_seed, prefix="val")
    det, seg = apply_split(train, split_partial(train, split_seed))
    return det, seg, val


class ExperimentRunner:
    """Trains (or reloads) named runs of a :class:`DeskProtocol`."""

    def __init__(self, workdir: str | Path, protocol: DeskProtocol = DeskProtocol()):
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.protocol = protocol
        self.seconds: dict[str, float] = {}  # training time of every run touched, cached or not
        self.calls: list[str] = []

    def ckpt(self, key: str) -> Path:
        return self.workdir / f"{key}.safetensors"

    def cost(self, since: int = 0) -> float:
        """Training seconds of the distinct runs requested after call number ``since``."""
        return float(sum(self.seconds[k] for k in set(self.calls[since:])))

    def _run(self, key: str, train) -> dict:
        self.calls.append(key)
        path = self.workdir / f"{key}.json"
        if path.exists() and self.ckpt(key).exists():
            rec = json.loads(path.read_text())
            self.seconds[key] = rec["seconds"]
            return rec["metrics"]
        t0 = time.perf_counter()
        state = train()
        seconds = time.perf_counter() - t0
        metrics = {k: v for k, v in state.history[-1].items() if k in ("mAP", "AP50", "mIoU")}
        state.save(self.ckpt(key), extra={"run": key})
        path.write_text(json.dumps({"metrics": metrics, "seconds": seconds}, indent=1))
        self.seconds[key] = seconds
        log.info("%s %s (%.0fs)", key, metrics, seconds)
        return metrics

    def stl(self, seed: int, task: Task | str) -> dict:
        task = Task(task)
        p = self.protocol
        det, seg, val = p.data(seed)
        data = det if task is Task.DET else seg
        return self._run(f"stl_{task.value}_s{seed}", lambda: train_single(
            data, task, p.model_config(), p.train_config(f"single_{task.value}", seed), val))

    def mtl(self, seed: int, mode: TrainMode | str = TrainMode.MT_ITERATION) -> dict:
        mode = TrainMode(mode)
        p = self.protocol
        det, seg, val = p.data(seed)
        return self._run(f"{mode.value}_s{seed}", lambda: train_multitask(
            det, seg, p.model_config(), p.train_config(mode, seed), val))

    def teacher(self, seed: int, task: Task | str) -> Path:
        task = Task(task)
        p = self.protocol
        det, seg, val = p.data(seed)
        data = det if task is Task.DET else seg
        self._run(f"teacher_{task.value}_s{seed}", lambda: train_single(
            data, task, p.model_config(teacher=True),
            p.train_config(f"single_{task.value}", seed, p.teacher_epochs), val))
        return self.ckpt(f"teacher_{task.value}_s{seed}")

    def student(self, seed: int, mode: KDMode | str) -> dict:
        mode = KDMode(mode)
        p = self.protocol
        det, seg, val = p.data(seed)
        dcfg = DistillConfig(mode, p.kd_weight, str(self.teacher(seed, Task.DET)), str(self.teacher(seed, Task.SEG)))
        return self._run(f"kd_{mode.value}_s{seed}", lambda: train_student(
            p.model_config(), det, seg, p.train_config(TrainMode.MT_ITERATION, seed), dcfg, val))

    def finetune_head(self, seed: int, task: Task | str) -> dict:
        """``task`` head trained on the frozen encoder of the other task's STL run."""
        task = Task(task)
        p = self.protocol
        det, seg, val = p.data(seed)
        self.stl(seed, task.other)
        source = self.ckpt(f"stl_{task.other.value}_s{seed}")
        data = det if task is Task.DET else seg
        return self._run(f"ft_head_{task.value}_s{seed}", lambda: finetune(
            source, data, task, True, p.model_config(), p.train_config(TrainMode.FINETUNE_HEAD, seed), val))


# ---------------------------------------------------------------------------
# Trend comparisons

@dataclass
class TrendResult:
    passed: bool
    summary: str
    table: dict = field(default_factory=dict)
    seconds: float = 0.0  # training time of the runs behind the comparison


def mtl_vs_stl(runner: ExperimentRunner, seeds=range(5), min_wins: int = 4) -> TrendResult:
    """MT_ITERATION >= STL on both mAP and mIoU per seed; MT_ITERATION >= MT_EPOCH on the mean."""
    start, rows = len(runner.calls), {}
    for s in seeds:
        rows[s] = {"stl_det": runner.stl(s, Task.DET)["mAP"], "stl_seg": runner.stl(s, Task.SEG)["mIoU"]}
        it, ep = runner.mtl(s, TrainMode.MT_ITERATION), runner.mtl(s, TrainMode.MT_EPOCH)
        rows[s].update(iter_det=it["mAP"], iter_seg=it["mIoU"], epoch_det=ep["mAP"], epoch_seg=ep["mIoU"])
    wins = sum(r["iter_det"] >= r["stl_det"] and r["iter_seg"] >= r["stl_seg"] for r in rows.values())
    mean = {k: float(np.mean([r[k] for r in rows.values()])) for k in next(iter(rows.values()))}
    beats_epoch = mean["iter_det"] >= mean["epoch_det"] and mean["iter_seg"] >= mean["epoch_seg"]
    summary = (f"MT_ITERATION >= STL on both tasks in {wins}/{len(rows)} seeds; mean mAP iter {mean['iter_det']:.2f} "
               f"epoch {mean['epoch_det']:.2f} stl {mean['stl_det']:.2f}; mean mIoU iter {mean['iter_seg']:.2f} "
               f"epoch {mean['epoch_seg']:.2f} stl {mean['stl_seg']:.2f}")
    return TrendResult(wins >= min_wins and beats_epoch, summary, {"seeds": rows, "mean": mean},
                       runner.cost(start))


def kd_vs_mtl(runner: ExperimentRunner, seeds=range(5), min_wins: int = 4) -> TrendResult:
    """Some KD mode beats the no-KD MTL student in >= ``min_wins`` seeds on some task;
    2mse >= 1mse on mean detection mAP."""
    start, rows = len(runner.calls), {}
    for s in seeds:
        base = runner.mtl(s, TrainMode.MT_ITERATION)
        rows[s] = {"mtl_det": base["mAP"], "mtl_seg": base["mIoU"]}
        for mode in (KDMode.MSE0, KDMode.MSE1, KDMode.MSE2):
            m = runner.student(s, mode)
            rows[s][f"{mode.value}_det"], rows[s][f"{mode.value}_seg"] = m["mAP"], m["mIoU"]
    wins = {}
    for mode in ("0mse", "1mse", "2mse"):
        for task in ("det", "seg"):
            wins[f"{mode}_{task}"] = sum(r[f"{mode}_{task}"] > r[f"mtl_{task}"] for r in rows.values())
    mean = {k: float(np.mean([r[k] for r in rows.values()])) for k in next(iter(rows.values()))}
    best = max(wins, key=wins.get)
    ordered = mean["2mse_det"] >= mean["1mse_det"]
    summary = (f"best KD improvement {best} in {wins[best]}/{len(rows)} seeds; mean det mAP 2mse "
               f"{mean['2mse_det']:.2f} 1mse {mean['1mse_det']:.2f} 0mse {mean['0mse_det']:.2f} "
               f"mtl {mean['mtl_det']:.2f}; mean mIoU 2mse {mean['2mse_seg']:.2f} 1mse {mean['1mse_seg']:.2f} "
               f"0mse {mean['0mse_seg']:.2f} mtl {mean['mtl_seg']:.2f}")
    return TrendResult(wins[best] >= min_wins and ordered, summary, {"seeds": rows, "mean": mean, "wins": wins},
                       runner.cost(start))


def finetune_gap(runner: ExperimentRunner, seeds=range(3)) -> TrendResult:
    """Head-only finetuning on a frozen cross-task encoder vs same-budget STL, both directions."""
    start, rows = len(runner.calls), {}
    for s in seeds:
        rows[s] = {"stl_det": runner.stl(s, Task.DET)["mAP"], "ft_det": runner.finetune_head(s, Task.DET)["mAP"],
                   "stl_seg": runner.stl(s, Task.SEG)["mIoU"], "ft_seg": runner.finetune_head(s, Task.SEG)["mIoU"]}
    mean = {k: float(np.mean([r[k] for r in rows.values()])) for k in next(iter(rows.values()))}
    passed = mean["ft_det"] < mean["stl_det"] and mean["ft_seg"] < mean["stl_seg"]
    summary = (f"mean det mAP head-only {mean['ft_det']:.2f} vs STL {mean['stl_det']:.2f}; "
               f"mean mIoU head-only {mean['ft_seg']:.2f} vs STL {mean['stl_seg']:.2f}")
    return TrendResult(passed, summary, {"seeds": rows, "mean": mean}, runner.cost(start))
