"""Aggregate finished run directories into comparison tables."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from .tide import COLUMNS, TideReport, format_table

STRATEGY_LABELS = {
    "single_det": "Single-task",
    "single_seg": "Single-task",
    "finetune_head": "Finetuning head",
    "finetune_full": "Finetuning full",
    "mt_epoch": "Multi-task (per epoch)",
    "mt_iteration": "Multi-task",
    "mt_full": "Multi-task (full annotations)",
}
KD_LABELS = {"0mse": "Multi-task + 0mse", "1mse": "Multi-task + 1mse", "2mse": "Multi-task + 2mse",
             "stl_kd": "Single-task + KD"}
STRATEGY_ORDER = ["Single-task", "Finetuning head", "Finetuning full", "Multi-task (per epoch)", "Multi-task",
                  "Multi-task (full annotations)"]
KD_ORDER = ["Single-task", "Single-task + KD", "Multi-task", "Multi-task + 0mse", "Multi-task + 1mse",
            "Multi-task + 2mse"]


def _load_run(run: Path) -> dict | None:
    cfg_path, eval_path = run / "config.resolved", run / "eval.json"
    if not (cfg_path.is_file() and eval_path.is_file()):
        return None
    cfg = yaml.safe_load(cfg_path.read_text(encoding="utf-8"))
    metrics = json.loads(eval_path.read_text(encoding="utf-8"))
    enc = cfg["model"]["encoder"]
    rec = {
        "name": run.name,
        "mode": cfg["train"]["mode"],
        "kd": (cfg.get("distill") or {}).get("mode"),
        "encoder": f"{enc['backbone']}+{enc['neck']}",
        "halve": cfg["data"].get("halve"),
        "metrics": metrics,
        "tide": TideReport.load(run / "tide.json") if (run / "tide.json").is_file() else None,
    }
    rec["label"] = KD_LABELS[rec["kd"]] if rec["kd"] else STRATEGY_LABELS[rec["mode"]]
    if rec["mode"] in ("finetune_head", "finetune_full") or rec["mode"] in ("single_det", "single_seg"):
        rec["task"] = "det" if ("mAP" in metrics and "mIoU" not in metrics) else "seg"
    return rec


def collect_runs(root: str | Path) -> list[dict]:
    """Every run directory (holding config.resolved and eval.json) below ``root``."""
    root = Path(root)
    runs = []
    for cfg in sorted(root.rglob("config.resolved")):
        rec = _load_run(cfg.parent)
        if rec is not None:
            runs.append(rec)
    return runs


def _fmt(values: list[float]) -> str:
    if not values:
        return "-"
    if len(values) == 1:
        return f"{values[0]:.2f}"
    return f"{np.mean(values):.2f}±{np.std(values):.2f}"


def _table(title: str, rows: dict, order: list[str]) -> str:
    keys = sorted(rows, key=lambda k: (order.index(k[0]) if k[0] in order else len(order), k))
    width = max([len(" / ".join(x for x in k if x)) for k in keys] + [10]) + 2
    lines = [title, f"{'Method':<{width}}{'Det mAP':>14}{'Det AP50':>14}{'Seg mIoU':>14}{'runs':>6}"]
    for k in keys:
        v = rows[k]
        label = " / ".join(x for x in k if x)
        cells = "".join(f"{_fmt(v.get(m, [])):>14}" for m in ("mAP", "AP50", "mIoU"))
        lines.append(f"{label:<{width}}{cells}{v['n']:>6}")
    return "\n".join(lines)


def build_report(root: str | Path) -> str:
    runs = collect_runs(root)
    if not runs:
        return f"no finished runs under {root}"
    strategy, kd = defaultdict(lambda: defaultdict(list)), defaultdict(lambda: defaultdict(list))
    for r in runs:
        halve = f"half {r['halve']}" if r["halve"] else ""
        key = (r["label"], r["encoder"], halve)
        targets = [kd] if r["kd"] else [strategy]
        if r["label"] in ("Multi-task", "Single-task"):
            targets.append(kd)
        for t in targets:
            t[key]["n"].append(1)
            for m in ("mAP", "AP50", "mIoU"):
                if m in r["metrics"]:
                    t[key][m].append(float(r["metrics"][m]))
    sections = []
    for title, rows, order in (("Training strategies", strategy, STRATEGY_ORDER),
                               ("Feature distillation", kd, KD_ORDER)):
        if rows and (title != "Feature distillation" or any(r["kd"] for r in runs)):
            sections.append(_table(title, {k: {**v, "n": len(v["n"])} for k, v in rows.items()}, order))
    tide_rows = [(r["name"], r["tide"].row()) for r in runs if r["tide"] is not None]
    if tide_rows:
        sections.append("Detection error breakdown (" + ", ".join(COLUMNS[1:]) + " are dAP50)\n"
                        + format_table(tide_rows))
    return "\n\n".join(sections)
