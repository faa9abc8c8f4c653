"""Source-classifier training and generator training against the frozen classifier."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Dataset, batches
from .errors import ConfigError, ContractError, TrainingDiverged
from .losses import LossWeights, total_loss
from .models import Generator, SourceClassifier, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "content", "style", "entropy", "total")


@dataclass
class TrainConfig:
    """Optimization settings. Defaults are those for generator training on digits."""
    epochs: int = 30
    batch_size: int = 128
    optimizer: str = "adam"
    lr: float = 1e-4
    schedule: str = "constant"
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_dir: Optional[Path] = None
    grad_clip: Optional[float] = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment: str = "none"

    def __post_init__(self):
        problems = []
        if not isinstance(self.epochs, int) or self.epochs < 1:
            problems.append(f"epochs must be an integer >= 1, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            problems.append(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            problems.append(f"lr must be > 0, got {self.lr!r}")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            problems.append(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            problems.append(f"grad_clip must be > 0 or None, got {self.grad_clip!r}")
        if problems:
            raise ConfigError(problems)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def source_config(**kw) -> TrainConfig:
    """Defaults for supervised source training: SGD at lr 1e-2."""
    base = dict(epochs=10, batch_size=128, optimizer="sgd", lr=1e-2, momentum=0.9,
                weight_decay=5e-4, grad_clip=None)
    base.update(kw)
    return TrainConfig(**base)


def finetune_config(**kw) -> TrainConfig:
    """Defaults for pseudo-label fine-tuning: SGD at lr 1e-3 for 5 epochs."""
    base = dict(epochs=5, batch_size=128, optimizer="sgd", lr=1e-3, momentum=0.9,
                weight_decay=5e-4, grad_clip=None)
    base.update(kw)
    return TrainConfig(**base)


def cosine_schedule(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


def make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _set_lr(opt, cfg: TrainConfig, step: int, total: int):
    if cfg.schedule == "cosine":
        lr = cosine_schedule(step, total, cfg.lr)
        for group in opt.param_groups:
            group["lr"] = lr


def _epoch_seed(seed: int, epoch: int) -> int:
    return seed * 100003 + epoch


def fit_classifier(model: SourceClassifier, dataset: Dataset, cfg: TrainConfig,
                   labels: Optional[torch.Tensor] = None) -> SourceClassifier:
    """Cross-entropy training of ``model`` in place.

    ``labels`` overrides the dataset labels (pseudo-label fine-tuning passes
    its own so the true labels are never read).
    """
    if labels is not None:
        data = Dataset(dataset.images, labels, dataset.domain_name, dataset.split, dataset.num_classes)
    else:
        data = dataset
    torch.manual_seed(cfg.seed)
    opt = make_optimizer([p for p in model.parameters() if p.requires_grad], cfg)
    n_steps = cfg.epochs * (len(data) // cfg.batch_size or 1)
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        running, seen = 0.0, 0
        for x, y in batches(data, cfg.batch_size, _epoch_seed(cfg.seed, epoch), cfg.augment,
                            mode="train" if len(data) >= cfg.batch_size else "eval"):
            _set_lr(opt, cfg, min(step, n_steps), n_steps)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                model.eval()
                raise TrainingDiverged(f"classifier loss became {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running += loss.item() * len(x)
            seen += len(x)
            step += 1
        log.info("classifier epoch %d/%d loss %.4f", epoch + 1, cfg.epochs, running / max(seen, 1))
    model.eval()
    return model


def train_source(dataset: Dataset, arch: Optional[dict] = None, cfg: Optional[TrainConfig] = None) -> SourceClassifier:
    """Train a classifier on labelled source data, freeze it and optionally checkpoint it."""
    cfg = cfg or source_config()
    arch = dict(arch or {})
    arch.setdefault("num_classes", dataset.num_classes)
    torch.manual_seed(cfg.seed)
    model = SourceClassifier(**arch)
    fit_classifier(model, dataset, cfg)
    model.freeze()
    if cfg.checkpoint_dir is not None:
        save_checkpoint(model, Path(cfg.checkpoint_dir) / "classifier.pt")
    return model


class MetricsLog:
    """Per-step loss records, optionally streamed to a CSV file."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)

    def append(self, step: int, values: dict):
        row = {"step": step, **{k: values[k] for k in METRIC_COLUMNS[1:]}}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] if k == "step" else repr(row[k]) for k in METRIC_COLUMNS])

    def epoch_means(self, steps_per_epoch: int, key: str = "style") -> list[float]:
        vals = [r[key] for r in self.rows]
        return [sum(vals[i:i + steps_per_epoch]) / len(vals[i:i + steps_per_epoch])
                for i in range(0, len(vals), steps_per_epoch)]


def train_generator(target: Dataset, model: SourceClassifier, cfg: Optional[TrainConfig] = None,
                    generator: Optional[nn.Module] = None, gen_arch: Optional[dict] = None,
                    metrics: Optional[MetricsLog] = None) -> Generator:
    """Fit a generator that translates ``target`` images toward the source style.

    The classifier must be frozen. Target labels are never read. With a
    checkpoint directory, ``generator_last.pt`` is rewritten every epoch and
    ``generator_best.pt`` keeps the epoch with the lowest mean total loss.
    """
    cfg = cfg or TrainConfig()
    if not model.frozen:
        raise ContractError("train_generator needs a frozen classifier")
    if cfg.batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2 for generator training, got {cfg.batch_size}")
    if len(target) < cfg.batch_size:
        raise ConfigError(f"target set has {len(target)} images, fewer than one batch of {cfg.batch_size}")
    metrics = metrics if metrics is not None else MetricsLog()
    torch.manual_seed(cfg.seed)
    g = generator if generator is not None else Generator(**(gen_arch or {}))
    g.train()
    stored = model.stored_stats()
    opt = make_optimizer(g.parameters(), cfg)
    steps_per_epoch = len(target) // cfg.batch_size
    n_steps = cfg.epochs * steps_per_epoch
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir is not None else None
    best = math.inf
    step = 0
    for epoch in range(cfg.epochs):
        epoch_total = 0.0
        for x, _ in batches(target, cfg.batch_size, _epoch_seed(cfg.seed, epoch), cfg.augment,
                            mode="generator", with_labels=False):
            _set_lr(opt, cfg, step, n_steps)
            report = total_loss(x, g, model, cfg.weights, stored)
            values = report.values()
            if not all(math.isfinite(v) for v in values.values()):
                g.eval()
                where = f" (last finite checkpoint: {ckpt_dir / 'generator_last.pt'})" if ckpt_dir and epoch else ""
                raise TrainingDiverged(f"generator loss became non-finite at step {step}{where}")
            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(g.parameters(), cfg.grad_clip)
            opt.step()
            metrics.append(step, values)
            epoch_total += values["total"]
            step += 1
        mean_total = epoch_total / steps_per_epoch
        log.info("generator epoch %d/%d mean total %.4f", epoch + 1, cfg.epochs, mean_total)
        if ckpt_dir is not None:
            g.eval()
            save_checkpoint(g, ckpt_dir / "generator_last.pt", {"epoch": epoch})
            if mean_total < best:
                save_checkpoint(g, ckpt_dir / "generator_best.pt", {"epoch": epoch, "mean_total": mean_total})
            g.train()
        best = min(best, mean_total)
    g.eval()
    return g
