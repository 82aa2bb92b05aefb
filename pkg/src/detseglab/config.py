"""Experiment config files: YAML trees with ``extends`` and strict key checking."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .dataio import SyntheticSpec
from .distill import DistillConfig
from .dethead import DetHeadConfig
from .encoder import ConfigError, EncoderConfig
from .model import ModelConfig
from .seghead import SegHeadConfig
from .trainer import TrainConfig

DATA_ROOT_ENV = "DETSEGLAB_DATA_ROOT"
CONFIG_DIR = Path(__file__).parent / "configs"


@dataclass
class DataConfig:
    root: str | None = None  # dataset directory holding train/ and val/ (see :mod:`dataio`)
    train: str = "train"
    val: str = "val"
    split_seed: int = 0
    seg_size: int | None = None  # None: split mask-bearing ids in half
    halve: str | None = None  # "det" | "seg": keep half of that side
    synthetic: dict | None = None  # generate in memory instead: {n_train, n_val, seed, val_seed, spec}


@dataclass
class FinetuneConfig:
    checkpoint: str | None = None
    task: str = "det"
    freeze_encoder: bool = True


@dataclass
class ExperimentConfig:
    name: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig | None = None
    finetune: FinetuneConfig | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "data": dict(vars(self.data)),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "distill": self.distill.to_dict() if self.distill else None,
            "finetune": dict(vars(self.finetune)) if self.finetune else None,
        }


def _check_keys(section: str, d: Any, cls) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {', '.join(unknown)} (allowed: {', '.join(sorted(allowed))})")
    return d


def _build(section: str, cls, d):
    try:
        return cls(**_check_keys(section, d, cls))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None


def from_dict(d: dict) -> ExperimentConfig:
    d = _check_keys("config", d, ExperimentConfig)
    m = _check_keys("model", d.get("model"), ModelConfig)
    model = ModelConfig(_build("model.encoder", EncoderConfig, m.get("encoder")),
                        _build("model.det", DetHeadConfig, m.get("det")),
                        _build("model.seg", SegHeadConfig, m.get("seg")))
    data = _build("data", DataConfig, d.get("data"))
    if data.synthetic is not None:
        syn = dict(data.synthetic)
        extra = sorted(set(syn) - {"n_train", "n_val", "seed", "val_seed", "spec"})
        if extra:
            raise ConfigError(f"unknown keys in data.synthetic: {', '.join(extra)}")
        _build("data.synthetic.spec", SyntheticSpec, syn.get("spec"))
    if data.halve not in (None, "det", "seg"):
        raise ConfigError(f"data.halve must be det or seg, got {data.halve!r}")
    return ExperimentConfig(
        name=str(d.get("name", "run")),
        data=data,
        model=model,
        train=_build("train", TrainConfig, d.get("train")),
        distill=_build("distill", DistillConfig, d["distill"]) if d.get("distill") is not None else None,
        finetune=_build("finetune", FinetuneConfig, d["finetune"]) if d.get("finetune") is not None else None,
    )


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve_parent(ref: str, here: Path) -> Path:
    p = Path(ref)
    for cand in (p, here / p, CONFIG_DIR / p, CONFIG_DIR / f"{ref}.yaml"):
        if cand.is_file():
            return cand
    raise ConfigError(f"{here}: cannot find extended config {ref!r}")


def read_tree(path: str | Path, _seen: tuple[Path, ...] = ()) -> dict:
    """The raw key tree of ``path`` with its ``extends`` chain merged in (child wins)."""
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"extends cycle through {path}")
    try:
        tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}") from None
    if not isinstance(tree, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    parents = tree.pop("extends", None) or []
    if isinstance(parents, str):
        parents = [parents]
    merged: dict = {}
    for ref in parents:
        merged = deep_merge(merged, read_tree(_resolve_parent(ref, path.parent), _seen + (path,)))
    return deep_merge(merged, tree)


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse a config file; ``$DETSEGLAB_DATA_ROOT`` replaces ``data.root`` when set."""
    tree = read_tree(path)
    if overrides:
        tree = deep_merge(tree, overrides)
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        tree = deep_merge(tree, {"data": {"root": env_root}})
    return from_dict(tree)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def write_resolved(cfg: ExperimentConfig, run_dir: str | Path) -> Path:
    path = Path(run_dir) / "config.resolved"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")
    return path


def parse_override(text: str) -> dict:
    """``a.b.c=value`` (value parsed as YAML) into a nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw)
    out: dict = {}
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out
