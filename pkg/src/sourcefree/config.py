"""Experiment configuration: YAML document plus command-line overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import DIGIT_DATASETS, SHIFTS
from .errors import ConfigError
from .losses import LossWeights
from .training import TrainConfig, finetune_config, source_config

COMMANDS = ("train-source", "train-generator", "adapt", "evaluate", "ablate", "export-grid")
SYNTH_SOURCE = "synth"
SYNTH_TARGETS = tuple(f"synth-{s}" for s in SHIFTS)

# Every accepted key with its default. Nested sections mirror the YAML layout.
DEFAULTS = {
    "command": None,
    "source": None,
    "target": None,
    "data_root": "data",
    "output_dir": "runs",
    "seeds": [0],
    "subsample": 1.0,
    "classifier_ckpt": None,
    "generator_ckpt": None,
    "synthetic": {"seed": 0, "n_per_class": 100, "test_per_class": 50},
    "classifier": {"widths": [64, 128, 256]},
    "generator": {"width": 32, "n_blocks": 4},
    "source_train": {"epochs": 10, "batch_size": 128, "optimizer": "sgd", "lr": 1e-2,
                     "momentum": 0.9, "weight_decay": 5e-4, "augment": "none"},
    "train": {"epochs": 30, "batch_size": 128, "optimizer": "adam", "lr": 1e-4,
              "schedule": "constant", "grad_clip": 10.0, "augment": "none",
              "lambda_content": 1.0, "lambda_style": 10.0, "lambda_entropy": 0.1},
    "finetune": {"epochs": 5, "batch_size": 128, "lr": 1e-3, "threshold": 0.95},
    "grid": {"n_images": 8},
}

_TYPES = {
    "command": str, "source": str, "target": str, "data_root": str, "output_dir": str,
    "seeds": list, "subsample": float, "classifier_ckpt": str, "generator_ckpt": str,
    "seed": int, "n_per_class": int, "test_per_class": int, "widths": list, "width": int, "n_blocks": int,
    "epochs": int, "batch_size": int, "optimizer": str, "lr": float, "momentum": float,
    "weight_decay": float, "augment": str, "schedule": str, "grad_clip": float,
    "lambda_content": float, "lambda_style": float, "lambda_entropy": float,
    "threshold": float, "n_images": int,
}
_NULLABLE = {"command", "source", "target", "classifier_ckpt", "generator_ckpt", "grad_clip"}

# flag destination -> dotted key
FLAG_KEYS = {
    "command": "command", "source": "source", "target": "target", "data_root": "data_root",
    "output_dir": "output_dir", "seeds": "seeds", "epochs": "train.epochs", "lr": "train.lr",
    "batch_size": "train.batch_size", "lambda_content": "train.lambda_content",
    "lambda_style": "train.lambda_style", "lambda_entropy": "train.lambda_entropy",
    "classifier_ckpt": "classifier_ckpt", "generator_ckpt": "generator_ckpt",
    "subsample": "subsample", "source_epochs": "source_train.epochs",
}


@dataclass
class ExperimentConfig:
    command: str
    source: str
    target: str
    data_root: Path
    output_dir: Path
    seeds: list
    train: TrainConfig
    source_train: TrainConfig
    finetune: TrainConfig
    raw: dict = field(repr=False)
    threshold: float = 0.95
    subsample: float = 1.0
    classifier_ckpt: Optional[Path] = None
    generator_ckpt: Optional[Path] = None

    @property
    def domain_pair(self) -> tuple:
        return (self.source, self.target)

    @property
    def synthetic(self) -> bool:
        return self.source == SYNTH_SOURCE

    @property
    def classifier_arch(self) -> dict:
        return {"widths": list(self.raw["classifier"]["widths"])}

    @property
    def generator_arch(self) -> dict:
        return dict(self.raw["generator"])

    def config_hash(self, seed: Optional[int] = None) -> str:
        doc = copy.deepcopy(self.raw)
        if seed is not None:
            doc["seeds"] = [seed]
        blob = json.dumps(doc, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_id(self, seed: int) -> str:
        return f"{self.command}-{self.config_hash(seed)}"


def _merge(base: dict, override: dict, prefix: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            problems.append(f"{name}: unknown key")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                problems.append(f"{name}: expected a mapping")
                continue
            out[key] = _merge(base[key], value, name + ".", problems)
        else:
            out[key] = value
    return out


def _check_types(doc: dict, prefix: str, problems: list):
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            _check_types(value, name + ".", problems)
            continue
        expected = _TYPES[key]
        if value is None:
            if key not in _NULLABLE:
                problems.append(f"{name}: must not be null")
            continue
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            doc[key] = float(value)
        elif expected is int and isinstance(value, bool):
            problems.append(f"{name}: expected int, got bool")
        elif not isinstance(value, expected):
            problems.append(f"{name}: expected {expected.__name__}, got {type(value).__name__} ({value!r})")


def _set_dotted(doc: dict, dotted: str, value):
    *parents, leaf = dotted.split(".")
    node = doc
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def _valid_domain(name: str) -> bool:
    return name in DIGIT_DATASETS or name == SYNTH_SOURCE or name in SYNTH_TARGETS


def parse_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Load ``path`` (YAML), apply flag ``overrides`` (dotted keys), fill defaults, validate.

    Every problem found is reported together in one ConfigError.
    """
    problems: list[str] = []
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"config: file not found: {path}"])
        try:
            doc = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config: not valid YAML: {exc}"]) from exc
        if not isinstance(doc, dict):
            raise ConfigError(["config: top level must be a mapping"])
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(doc, dotted, value)
    merged = _merge(DEFAULTS, doc, "", problems)
    _check_types(merged, "", problems)
    if problems:
        raise ConfigError(problems)

    cmd = merged["command"]
    if cmd not in COMMANDS:
        problems.append(f"command: must be one of {', '.join(COMMANDS)}, got {cmd!r}")
    for key in ("source", "target"):
        v = merged[key]
        if v is None:
            problems.append(f"{key}: required")
        elif not _valid_domain(v):
            problems.append(f"{key}: unknown domain {v!r}")
    src, tgt = merged["source"], merged["target"]
    if src and tgt and (src == SYNTH_SOURCE) != (tgt in SYNTH_TARGETS):
        problems.append(f"source/target: synthetic domains pair only with each other ({src!r}, {tgt!r})")
    seeds = merged["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        problems.append(f"seeds: expected a non-empty list of integers, got {seeds!r}")
    if not 0 < merged["subsample"] <= 1:
        problems.append(f"subsample: must be in (0, 1], got {merged['subsample']}")
    if merged["synthetic"]["n_per_class"] < 10:
        problems.append("synthetic.n_per_class: must be >= 10")
    if merged["synthetic"]["test_per_class"] < 10:
        problems.append("synthetic.test_per_class: must be >= 10")
    if not 0 <= merged["finetune"]["threshold"] <= 1:
        problems.append("finetune.threshold: must be in [0, 1]")
    widths = merged["classifier"]["widths"]
    if len(widths) != 3 or not all(isinstance(w, int) and w > 0 for w in widths):
        problems.append(f"classifier.widths: expected three positive integers, got {widths!r}")
    if merged["generator"]["width"] < 1 or merged["generator"]["n_blocks"] < 0:
        problems.append("generator: width must be >= 1 and n_blocks >= 0")
    for key in ("classifier_ckpt", "generator_ckpt"):
        if merged[key] is not None and not Path(merged[key]).exists():
            problems.append(f"{key}: file not found: {merged[key]}")
    if cmd in ("evaluate", "train-generator") and merged["classifier_ckpt"] is None:
        problems.append(f"classifier_ckpt: required for {cmd}")
    if cmd == "export-grid" and merged["generator_ckpt"] is None:
        problems.append("generator_ckpt: required for export-grid")

    t, s, f = merged["train"], merged["source_train"], merged["finetune"]
    train = source = fine = None
    try:
        weights = LossWeights(t["lambda_content"], t["lambda_style"], t["lambda_entropy"])
    except ValueError as exc:
        problems.append(f"train: {exc}")
        weights = None
    for label, build in (
        ("train", lambda: TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], optimizer=t["optimizer"],
                                      lr=t["lr"], schedule=t["schedule"], weights=weights,
                                      grad_clip=t["grad_clip"], augment=t["augment"])),
        ("source_train", lambda: source_config(epochs=s["epochs"], batch_size=s["batch_size"],
                                               optimizer=s["optimizer"], lr=s["lr"], momentum=s["momentum"],
                                               weight_decay=s["weight_decay"], augment=s["augment"])),
        ("finetune", lambda: finetune_config(epochs=f["epochs"], batch_size=f["batch_size"], lr=f["lr"])),
    ):
        try:
            built = build()
        except ConfigError as exc:
            problems.extend(f"{label}: {p}" for p in exc.problems)
            continue
        if label == "train":
            train = built
        elif label == "source_train":
            source = built
        else:
            fine = built
    if train is not None and train.batch_size < 2:
        problems.append("train.batch_size: must be >= 2 for generator training")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        command=cmd, source=src, target=tgt, data_root=Path(merged["data_root"]),
        output_dir=Path(merged["output_dir"]), seeds=list(seeds), train=train, source_train=source,
        finetune=fine, raw=merged, threshold=merged["finetune"]["threshold"],
        subsample=merged["subsample"],
        classifier_ckpt=Path(merged["classifier_ckpt"]) if merged["classifier_ckpt"] else None,
        generator_ckpt=Path(merged["generator_ckpt"]) if merged["generator_ckpt"] else None,
    )
