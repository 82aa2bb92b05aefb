"""Command-line entry point: ``detseglab <command> ...``.

Every run writes into its own directory: ``config.resolved``,
``checkpoints/``, ``metrics.jsonl``, ``eval.json``, ``tide.json``, ``figures/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .config import ExperimentConfig
from .dataio import (VOC_SEG_SUBSET_SIZE, Dataset, DatasetError, SyntheticSpec, Task, apply_split,
                     generate_synthetic, halve_subset, load_dataset, load_split, load_voc_id_lists,
                     save_dataset, save_split, split_partial)
from .encoder import ConfigError

log = logging.getLogger("detseglab")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Data from a config

def _load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None, object]:
    """(train, val, split) for an experiment config."""
    d = cfg.data
    if d.synthetic is not None:
        syn = d.synthetic
        spec = SyntheticSpec.from_dict(syn.get("spec") or {})
        train = generate_synthetic(int(syn.get("n_train", 400)), spec, int(syn.get("seed", 0)))
        n_val = int(syn.get("n_val", 100))
        val = generate_synthetic(n_val, spec, int(syn.get("val_seed", 99999)), prefix="val") if n_val else None
        stored = None
    else:
        if d.root is None:
            raise CliError(f"data.root is not set (config or ${cfgmod.DATA_ROOT_ENV})")
        root = Path(d.root)
        train = load_dataset(root / d.train)
        val = load_dataset(root / d.val) if (root / d.val).exists() else None
        stored = root / d.train / "split.json"
        stored = load_split(stored) if stored.exists() else None
    split = stored or split_partial(train, d.split_seed, d.seg_size)
    if d.halve:
        split = halve_subset(split, d.halve, d.split_seed)
    return train, val, split


# ---------------------------------------------------------------------------
# Commands

def cmd_synth(a) -> int:
    spec = SyntheticSpec()
    if a.spec:
        text = Path(a.spec).read_text(encoding="utf-8") if Path(a.spec).is_file() else a.spec
        spec = SyntheticSpec.from_dict(yaml.safe_load(text) or {})
    ds = generate_synthetic(a.n, spec, a.seed, prefix=a.prefix)
    save_dataset(ds, a.out)
    print(f"wrote {len(ds)} images to {a.out}")
    return 0


def cmd_split(a) -> int:
    if a.voc_lists:
        flags = load_voc_id_lists(*a.voc_lists)
        seg_size = a.seg_size if a.seg_size is not None else VOC_SEG_SUBSET_SIZE
    else:
        if not a.data:
            raise CliError("split needs --data or --voc-lists")
        flags = load_dataset(a.data)
        seg_size = a.seg_size
    split = split_partial(flags, a.seed, seg_size)
    if a.halve:
        split = halve_subset(split, a.halve, a.seed)
    out = a.out or (Path(a.data) / "split.json" if a.data else None)
    if out:
        save_split(split, out)
    print(f"det {len(split.det_ids)} seg {len(split.seg_ids)}" + (f" -> {out}" if out else ""))
    return 0


def _run_dir(a, cfg: ExperimentConfig) -> Path:
    return Path(a.out) if a.out else Path("runs") / cfg.name


def _load_cli_config(a) -> ExperimentConfig:
    overrides = {}
    for text in a.set or ():
        overrides = cfgmod.deep_merge(overrides, cfgmod.parse_override(text))
    path = Path(a.config)
    if not path.is_file() and (cfgmod.CONFIG_DIR / path).is_file():
        path = cfgmod.CONFIG_DIR / path  # bare names refer to the shipped configs
    return cfgmod.load_config(path, overrides)


def _train_run(cfg: ExperimentConfig, run_dir: Path) -> dict:
    from .distill import train_student
    from .trainer import TrainMode, finetune, run_training, _seeded_model

    train, val, split = _load_data(cfg)
    det, seg = apply_split(train, split)
    tc, mc, mode = cfg.train, cfg.model, cfg.train.mode
    run_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(cfg, run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")

    def on_epoch_end(state, record):
        with metrics_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        state.save(ckpt_dir / "last.safetensors")

    kw = dict(val=val, on_epoch_end=on_epoch_end)
    if cfg.distill is not None:
        state = train_student(mc, det if mode is not TrainMode.SINGLE_SEG else None,
                              seg if mode is not TrainMode.SINGLE_DET else None, tc, cfg.distill, **kw)
    elif mode in (TrainMode.SINGLE_DET, TrainMode.SINGLE_SEG):
        task = Task.DET if mode is TrainMode.SINGLE_DET else Task.SEG
        state = run_training(_seeded_model(mc, [task], tc.seed), tc, {task: det if task is Task.DET else seg}, **kw)
    elif mode in (TrainMode.MT_EPOCH, TrainMode.MT_ITERATION):
        state = run_training(_seeded_model(mc, [Task.DET, Task.SEG], tc.seed), tc,
                             {Task.DET: det, Task.SEG: seg}, **kw)
    elif mode is TrainMode.MT_FULL:
        state = run_training(_seeded_model(mc, [Task.DET, Task.SEG], tc.seed), tc, {Task.DET: train}, **kw)
    else:
        ft = cfg.finetune
        if ft is None or ft.checkpoint is None:
            raise CliError(f"mode {mode.value} needs finetune.checkpoint")
        task = Task(ft.task)
        frozen = mode is TrainMode.FINETUNE_HEAD
        state = finetune(ft.checkpoint, det if task is Task.DET else seg, task, frozen, mc, tc, **kw)
    final = ckpt_dir / "final.safetensors"
    shutil.copyfile(ckpt_dir / "last.safetensors", final)
    result = {k: v for k, v in state.history[-1].items() if k in ("mAP", "AP50", "mIoU")}
    if result:
        (run_dir / "eval.json").write_text(json.dumps(result, indent=1), encoding="utf-8")
    return result


def cmd_train(a) -> int:
    cfg = _load_cli_config(a)
    if cfg.distill is not None:
        raise CliError("config has a distill section; use the distill command")
    result = _train_run(cfg, _run_dir(a, cfg))
    print(json.dumps(result))
    return 0


def cmd_distill(a) -> int:
    from .distill import DistillConfig

    cfg = _load_cli_config(a)
    base = cfg.distill or DistillConfig()
    cfg.distill = DistillConfig(a.mode or base.mode, base.kd_weight if a.kd_weight is None else a.kd_weight,
                                a.teacher_det or base.teacher_det, a.teacher_seg or base.teacher_seg)
    result = _train_run(cfg, _run_dir(a, cfg))
    print(json.dumps(result))
    return 0


def cmd_eval(a) -> int:
    from .evalmetrics import compute_map, compute_miou, gt_records, write_predictions
    from .model import load_checkpoint
    from .trainer import predict_dataset

    model, _ = load_checkpoint(a.ckpt)
    data = load_dataset(a.data)
    dets, masks = predict_dataset(model, data)
    out = {}
    if model.det_head is not None:
        res = compute_map(dets, gt_records(data))
        out.update(res.to_json())
    if model.seg_head is not None:
        with_mask = [(m, s.mask) for m, s in zip(masks, data) if s.mask is not None]
        if with_mask:
            res = compute_miou([m for m, _ in with_mask], [g for _, g in with_mask], model.cfg.seg.num_classes,
                               model.cfg.seg.ignore_label)
            out.update(res.to_json())
    out_path = Path(a.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(out, indent=1), encoding="utf-8")
    if model.det_head is not None:
        write_predictions(dets, a.pred_out or out_path.with_name("predictions.json"))
    print(json.dumps({k: v for k, v in out.items() if k in ("mAP", "AP50", "mIoU")}))
    return 0


def cmd_tide(a) -> int:
    from .evalmetrics import read_gt_annotations, read_predictions
    from .tide import TideReport, comparison_table, format_table, tide_deltas

    gts = read_gt_annotations(a.gt)
    report = tide_deltas(read_predictions(a.pred), gts)
    if a.out:
        report.save(a.out)
    if a.compare:
        obj = json.loads(Path(a.compare).read_text(encoding="utf-8"))
        other = TideReport.from_json(obj) if isinstance(obj, dict) and "gt_fingerprint" in obj \
            else tide_deltas(read_predictions(a.compare), gts)
        print(comparison_table(report, other, Path(a.pred).stem, Path(a.compare).stem))
    else:
        print(format_table([(Path(a.pred).stem, report.row())]))
    return 0


def cmd_cam(a) -> int:
    from PIL import Image

    from .introspect import CamTarget, grad_cam, save_composite, save_heatmap
    from .model import load_checkpoint

    model, _ = load_checkpoint(a.ckpt)
    image = np.asarray(Image.open(a.image).convert("RGB"), np.float32) / 255
    cam = grad_cam(model, image, CamTarget.parse(a.target), a.levels)
    out = Path(a.out)
    save_heatmap(cam, out)
    save_composite(image, {a.target: cam}, out.with_name(out.stem + "_composite.png"))
    print(f"wrote {out}")
    return 0


def cmd_report(a) -> int:
    from .report import build_report

    text = build_report(a.runs)
    if a.out:
        Path(a.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="detseglab", description="Partially annotated detection + segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--spec", help="YAML file or inline mapping of generator settings")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prefix", default="img")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="assign ids to the detection or segmentation subset")
    s.add_argument("--data", help="dataset directory")
    s.add_argument("--voc-lists", nargs=2, metavar=("DET_LIST", "SEG_LIST"),
                   help="id lists of box-annotated images and of those with masks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seg-size", type=int)
    s.add_argument("--halve", choices=["det", "seg"])
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    for name, func in (("train", cmd_train), ("distill", cmd_distill)):
        s = sub.add_parser(name, help=f"{name} from a config file")
        s.add_argument("--config", required=True)
        s.add_argument("--out", help="run directory (default runs/<name>)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name == "distill":
            s.add_argument("--teacher-det")
            s.add_argument("--teacher-seg")
            s.add_argument("--mode", choices=["0mse", "1mse", "2mse", "stl_kd"])
            s.add_argument("--kd-weight", type=float)
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pred-out", help="where to write detections (default predictions.json next to --out)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("tide", help="detection error breakdown")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True, help="dataset directory or annotations.json")
    s.add_argument("--compare", help="second predictions file or saved report")
    s.add_argument("--out")
    s.set_defaults(func=cmd_tide)

    s = sub.add_parser("cam", help="Grad-CAM heatmap for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--target", default="det", help="det[:class[:anchor]] or seg:class")
    s.add_argument("--levels", type=int, nargs="+", default=[0])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cam)

    s = sub.add_parser("report", help="tabulate finished runs")
    s.add_argument("--runs", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, DatasetError, ValueError, KeyError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"detseglab {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
