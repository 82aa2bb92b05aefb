import math

import pytest
import torch

from detseglab.dataio import Task
from detseglab.dethead import Detection
from detseglab.experiments import DeskProtocol
from detseglab.model import MultiTaskNet, save_checkpoint, state_fingerprint
from detseglab.trainer import (TaskData, TrainConfig, TrainMode, TrainState, accumulate_iteration,
                               build_optimizer, evaluate, evaluate_checkpoint, finetune, iterations_per_epoch,
                               load_train_state, run_training, train_full, train_multitask, train_single)

from conftest import tiny_model_config


def _cfg(**kw):
    base = dict(epochs=1, lr=0.01, batch_size=4, mode=TrainMode.SINGLE_DET, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _head(model, task):
    prefix = "det_head." if task is Task.DET else "seg_head."
    return {k: v for k, v in state_fingerprint(model).items() if k.startswith(prefix)}


def _encoder(model):
    return {k: v for k, v in state_fingerprint(model).items() if k.startswith("encoder.")}


def test_config_validation():
    for bad in (dict(epochs=0), dict(lr=-1.0), dict(batch_size=0), dict(mode="round_robin")):
        with pytest.raises(ValueError):
            _cfg(**bad)


def test_lr_zero_changes_nothing(tiny_data):
    _, det, _ = tiny_data
    torch.manual_seed(0)
    init = state_fingerprint(MultiTaskNet(tiny_model_config(), [Task.DET]))
    state = train_single(det, "det", tiny_model_config(), _cfg(lr=0.0, epochs=2))
    assert state_fingerprint(state.model) == init


def test_step_count(tiny_data):
    full, det, seg = tiny_data
    steps = []
    for n in (len(det), 5):
        cfg = _cfg(batch_size=4)
        state = train_single(det.subset(det.ids[:n]), Task.DET, tiny_model_config(), cfg)
        assert state.iteration == math.ceil(n / 4)
        steps.append(state.iteration)
    state = train_multitask(det, seg, tiny_model_config(), _cfg(mode=TrainMode.MT_ITERATION, batch_size=4))
    assert len(det) == len(seg)
    assert state.iteration == math.ceil(len(det) / 4)
    assert iterations_per_epoch(_cfg(mode=TrainMode.MT_ITERATION, batch_size=4), {Task.DET: 6, Task.SEG: 6}) == 2


def test_determinism(tiny_data):
    _, det, seg = tiny_data
    cfg = _cfg(mode=TrainMode.MT_ITERATION, epochs=2, hflip=True)
    a = train_multitask(det, seg, tiny_model_config(), cfg)
    b = train_multitask(det, seg, tiny_model_config(), cfg)
    assert a.history[-1]["losses"] == b.history[-1]["losses"]
    assert state_fingerprint(a.model) == state_fingerprint(b.model)


def test_wrong_task_samples_rejected(tiny_data):
    _, det, seg = tiny_data
    with pytest.raises(ValueError, match="tagged"):
        train_single(seg, Task.DET, tiny_model_config(), _cfg())
    with pytest.raises(ValueError):
        train_multitask(det, seg, tiny_model_config(), _cfg(mode=TrainMode.SINGLE_DET))


def test_single_task_builds_one_head(tiny_data):
    _, _, seg = tiny_data
    state = train_single(seg, Task.SEG, tiny_model_config(), _cfg(mode=TrainMode.SINGLE_SEG))
    assert state.model.det_head is None and state.model.seg_head is not None


# ---------------------------------------------------------------------------
# Multi-task contracts

def test_epoch_mode_leaves_other_head_untouched(tiny_data):
    _, det, seg = tiny_data
    seen = []
    snaps = []

    def on_epoch(state, record):
        snaps.append(state_fingerprint(state.model))

    def on_iter(state, cycle):
        seen.append(tuple(t for t, _ in cycle))

    torch.manual_seed(0)
    model = MultiTaskNet(tiny_model_config())
    first = state_fingerprint(model)
    run_training(model, _cfg(mode=TrainMode.MT_EPOCH, epochs=2), {Task.DET: det, Task.SEG: seg},
                 on_epoch_end=on_epoch, on_iteration=on_iter)
    epoch_tasks = [seen[0][0], seen[-1][0]]
    assert set(epoch_tasks) == {Task.DET, Task.SEG}  # each task trained exactly once in two epochs
    assert all(len(c) == 1 for c in seen)
    before = [first, snaps[0]]
    for (task,), (after, prev) in zip([(epoch_tasks[0],), (epoch_tasks[1],)], zip(snaps, before)):
        other = "seg_head." if task is Task.DET else "det_head."
        mine = "det_head." if task is Task.DET else "seg_head."
        assert all(after[k] == prev[k] for k in prev if k.startswith(other))
        assert any(after[k] != prev[k] for k in prev if k.startswith(mine))


def test_iteration_mode_accumulates_encoder_gradients(tiny_data):
    _, det, seg = tiny_data
    torch.manual_seed(0)
    model = MultiTaskNet(tiny_model_config())
    cfg = _cfg(mode=TrainMode.MT_ITERATION)
    state = TrainState(model, cfg, build_optimizer(model, cfg))
    dd, sd = TaskData(det), TaskData(seg)
    ids_d, ids_s = det.ids[:4], seg.ids[:4]

    def grads():
        return {n: (p.grad.clone() if p.grad is not None else None) for n, p in model.named_parameters()}

    accumulate_iteration(state, [(Task.DET, dd, ids_d)])
    g_det = grads()
    accumulate_iteration(state, [(Task.SEG, sd, ids_s)])
    g_seg = grads()
    accumulate_iteration(state, [(Task.DET, dd, ids_d), (Task.SEG, sd, ids_s)])
    fused = grads()
    for n, g in fused.items():
        if n.startswith("encoder."):
            ref = g_det[n] + g_seg[n]
            err = (g - ref).abs().max() / ref.abs().max().clamp_min(1e-12)
            assert err <= 1e-6, n
        elif n.startswith("det_head."):
            assert g_seg[n] is None
            assert torch.equal(g, g_det[n])  # nothing from the seg batch
        else:
            assert g_det[n] is None
            assert torch.equal(g, g_seg[n])


def test_iteration_mode_updates_once_per_cycle(tiny_data):
    _, det, seg = tiny_data
    cycles = []
    state = train_multitask(det, seg, tiny_model_config(), _cfg(mode=TrainMode.MT_ITERATION),
                            on_iteration=lambda s, c: cycles.append([t for t, _ in c]))
    assert all(sorted(c) == [Task.DET, Task.SEG] for c in cycles)
    assert state.iteration == len(cycles)


def test_full_mode_sums_both_losses(tiny_data):
    full, _, _ = tiny_data
    state = train_full(full, tiny_model_config(), _cfg(mode=TrainMode.MT_FULL))
    assert {"det_cls", "det_loc", "seg"} <= set(state.history[-1]["losses"])


# ---------------------------------------------------------------------------
# Finetuning

def _pretrained(tmp_path, seg):
    state = train_single(seg, Task.SEG, tiny_model_config(), _cfg(mode=TrainMode.SINGLE_SEG))
    path = tmp_path / "seg.safetensors"
    save_checkpoint(state.model, path)
    return state.model, path


def test_finetune_frozen_encoder(tiny_data, tmp_path):
    _, det, seg = tiny_data
    src, path = _pretrained(tmp_path, seg)
    state = finetune(path, det, Task.DET, True, tiny_model_config(), _cfg(mode=TrainMode.FINETUNE_HEAD))
    assert _encoder(state.model) == _encoder(src)
    torch.manual_seed(0)
    fresh = _head(MultiTaskNet(tiny_model_config(), [Task.DET]), Task.DET)
    assert _head(state.model, Task.DET) != fresh


def test_finetune_full_lr_zero(tiny_data, tmp_path):
    _, det, seg = tiny_data
    src, path = _pretrained(tmp_path, seg)
    state = finetune(path, det, Task.DET, False, tiny_model_config(), _cfg(mode=TrainMode.FINETUNE_FULL, lr=0.0))
    assert _encoder(state.model) == _encoder(src)
    with pytest.raises(ValueError, match="trained for"):
        finetune(path, seg, Task.SEG, True, tiny_model_config(), _cfg(mode=TrainMode.FINETUNE_HEAD))
    with pytest.raises(ValueError):
        finetune(path, det, Task.DET, True, tiny_model_config(channels=8), _cfg(mode=TrainMode.FINETUNE_HEAD))


# ---------------------------------------------------------------------------
# Checkpoints and evaluation

def test_resume_is_bit_identical(tiny_data, tmp_path):
    _, det, seg = tiny_data
    cfg = _cfg(mode=TrainMode.MT_ITERATION, epochs=3, hflip=True, cosine=True, warmup_iters=2)
    straight = train_multitask(det, seg, tiny_model_config(), cfg)

    saved = []

    def stop_after_one(state, record):
        if state.epoch == 1:
            state.save(tmp_path / "e1.safetensors")
            saved.append(True)

    torch.manual_seed(cfg.seed)
    model = MultiTaskNet(tiny_model_config())
    partial = run_training(model, TrainConfig(**{**cfg.to_dict(), "epochs": 3}), {Task.DET: det, Task.SEG: seg},
                           on_epoch_end=stop_after_one)
    assert saved
    state = load_train_state(tmp_path / "e1.safetensors")
    assert state.epoch == 1
    resumed = run_training(state.model, state.config, {Task.DET: det, Task.SEG: seg}, state=state)
    assert state_fingerprint(resumed.model) == state_fingerprint(straight.model) == state_fingerprint(partial.model)
    assert resumed.history == [{**h, "seconds": r["seconds"]} for h, r in zip(straight.history, resumed.history)]


class _Playback(MultiTaskNet):
    """Replays ground truth in dataset order."""

    def __init__(self, cfg, dataset):
        super().__init__(cfg)
        self._samples = iter(dataset)

    def predict(self, images):
        out = []
        for _ in range(len(images)):
            s = next(self._samples)
            dets = [Detection(tuple(float(v) for v in b), int(c), 1.0) for b, c in zip(s.boxes, s.labels)]
            out.append({"detections": dets, "mask": s.mask})
        return out


def test_ground_truth_playback_is_perfect(tiny_data):
    full, _, _ = tiny_data
    res = evaluate(_Playback(tiny_model_config(), full), full, batch_size=5)
    assert res["mAP"] == 100 and res["AP50"] == 100 and res["mIoU"] == 100


def test_evaluate_untrained_checkpoint(tiny_data, tmp_path):
    import time

    full, _, _ = tiny_data
    val = full.subset(full.ids[:5])
    save_checkpoint(MultiTaskNet(tiny_model_config()), tmp_path / "m.safetensors")
    t0 = time.perf_counter()
    a = evaluate_checkpoint(tmp_path / "m.safetensors", val)
    assert time.perf_counter() - t0 < 10
    assert all(0 <= a[k] <= 100 for k in ("mAP", "AP50", "mIoU"))
    assert evaluate_checkpoint(tmp_path / "m.safetensors", val) == a


def test_losses_decrease_over_first_epochs():
    protocol = DeskProtocol()
    wins = 0
    for seed in range(5):
        det, seg, _ = protocol.data(seed)
        cfg = protocol.train_config(TrainMode.MT_ITERATION, seed, epochs=3)
        hist = train_multitask(det, seg, protocol.model_config(), cfg).history
        det_l = [h["losses"]["det_cls"] + h["losses"]["det_loc"] for h in hist]
        seg_l = [h["losses"]["seg"] for h in hist]
        wins += all(a > b for a, b in zip(det_l, det_l[1:])) and all(a > b for a, b in zip(seg_l, seg_l[1:]))
    assert wins >= 4
