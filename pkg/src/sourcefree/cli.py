"""Command-line entry point.

    sourcefree --command adapt --source svhn --target mnist --data-root data --seeds 0 1 2

Each (config, seed) pair gets its own run directory ``<output_dir>/<command>-<hash>``
holding a JSON manifest, metrics, checkpoints and result tables. Multi-seed
summaries land in ``<output_dir>/<command>-<hash>-summary``.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import traceback
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .baselines import adabn, finetune, mine_pseudo_labels
from .config import FLAG_KEYS, SYNTH_SOURCE, ExperimentConfig, parse_config
from .data import Dataset, load_digit_dataset, make_synthetic_pair
from .errors import ConfigError
from .evaluation import (EvalResult, evaluate, format_table, paired_t_test, run_ablation,
                         write_results_csv)
from .models import file_hash, load_checkpoint, save_checkpoint
from .plotting import export_grid, plot_accuracy, plot_loss_curves
from .training import MetricsLog, train_generator, train_source

log = logging.getLogger("sourcefree")


class Manifest:
    """JSON record of one run; rewritten whenever its state changes."""

    def __init__(self, run_dir: Path, cfg: ExperimentConfig, seed: int):
        self.run_dir = run_dir
        self.path = run_dir / "manifest.json"
        self.doc = {
            "run_id": run_dir.name,
            "state": "running",
            "command": cfg.command,
            "seed": seed,
            "config": cfg.raw,
            "versions": {"sourcefree": __version__, "torch": torch.__version__,
                         "numpy": np.__version__, "python": platform.python_version()},
            "artifacts": {},
        }
        self.write()

    def add(self, name: str, path: Path):
        self.doc["artifacts"][name] = {"path": str(path.relative_to(self.run_dir)), "sha256": file_hash(path)}
        self.write()

    def finish(self, state: str, error: Optional[str] = None):
        self.doc["state"] = state
        if error:
            self.doc["error"] = error
        self.write()

    def write(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True, default=str) + "\n")


def load_domain(cfg: ExperimentConfig, name: str, split: str) -> Dataset:
    syn = cfg.raw["synthetic"]
    if name.startswith(SYNTH_SOURCE):
        shift = cfg.target[len(SYNTH_SOURCE) + 1:]
        n = syn["n_per_class"] if split == "train" else syn["test_per_class"]
        pair = make_synthetic_pair(syn["seed"], n, shift, split=split)
        data = pair.source if name == SYNTH_SOURCE else pair.target
    else:
        data = load_digit_dataset(name, split, cfg.data_root)
    if split == "train" and cfg.subsample < 1:
        data = data.subsample(cfg.subsample, seed=syn["seed"])
    return data


def _pair(cfg):
    return f"{cfg.source}->{cfg.target}"


def _classifier(cfg: ExperimentConfig, seed: int, man: Manifest):
    if cfg.classifier_ckpt is not None:
        return load_checkpoint(cfg.classifier_ckpt, expect="classifier")
    src = load_domain(cfg, cfg.source, "train")
    model = train_source(src, cfg.classifier_arch, cfg.source_train.with_(seed=seed))
    path = man.run_dir / "classifier.pt"
    save_checkpoint(model, path)
    man.add("classifier", path)
    return model


def _generator(cfg: ExperimentConfig, seed: int, man: Manifest, model, target: Dataset):
    metrics_path = man.run_dir / "metrics.csv"
    metrics = MetricsLog(metrics_path)
    g = train_generator(target, model, cfg.train.with_(seed=seed, checkpoint_dir=man.run_dir / "checkpoints"),
                        gen_arch=cfg.generator_arch, metrics=metrics)
    path = man.run_dir / "generator.pt"
    save_checkpoint(g, path)
    man.add("generator", path)
    man.add("metrics", metrics_path)
    for name in ("generator_best", "generator_last"):
        p = man.run_dir / "checkpoints" / f"{name}.pt"
        if p.exists():
            man.add(name, p)
    fig = plot_loss_curves(metrics.rows, man.run_dir / "loss_curves.png", _pair(cfg))
    man.add("loss_curves", fig)
    return g


def _run_seed(cfg: ExperimentConfig, seed: int, man: Manifest) -> list[EvalResult]:
    cmd, pair = cfg.command, _pair(cfg)
    torch.manual_seed(seed)
    if cmd == "train-source":
        model = _classifier(cfg, seed, man)
        test = load_domain(cfg, cfg.source, "test")
        rows = [evaluate(model, None, test, "no_da", seed, f"{cfg.source}->{cfg.source}"),
                evaluate(model, None, load_domain(cfg, cfg.target, "test"), "no_da", seed, pair)]
        return rows
    if cmd == "train-generator":
        model = _classifier(cfg, seed, man)
        _generator(cfg, seed, man, model, load_domain(cfg, cfg.target, "train"))
        return []
    if cmd == "evaluate":
        model = _classifier(cfg, seed, man)
        g = load_checkpoint(cfg.generator_ckpt, expect="generator") if cfg.generator_ckpt else None
        return [evaluate(model, g, load_domain(cfg, cfg.target, "test"), seed=seed, pair=pair)]
    if cmd == "adapt":
        model = _classifier(cfg, seed, man)
        target = load_domain(cfg, cfg.target, "train")
        test = load_domain(cfg, cfg.target, "test")
        g = _generator(cfg, seed, man, model, target)
        rows = [evaluate(model, None, test, "no_da", seed, pair),
                evaluate(model, g, test, "translate", seed, pair),
                evaluate(adabn(model, target), None, test, "adabn", seed, pair)]
        ft_cfg = cfg.finetune.with_(seed=seed)
        plain = mine_pseudo_labels(model, None, target, cfg.threshold)
        agreed = mine_pseudo_labels(model, g, target, cfg.threshold)
        for name, pseudo in (("finetune", plain), ("translate_finetune", agreed)):
            path = man.run_dir / f"pseudo_labels_{name}.csv"
            pseudo.save_csv(path)
            man.add(f"pseudo_labels_{name}", path)
            rows.append(evaluate(finetune(model, target, pseudo, ft_cfg), None, test, name, seed, pair))
        return rows
    if cmd == "ablate":
        model = _classifier(cfg, seed, man)
        target = load_domain(cfg, cfg.target, "train")
        test = load_domain(cfg, cfg.target, "test")
        return run_ablation(target, model, cfg.train.with_(seed=seed), test, cfg.generator_arch, pair,
                            metrics_dir=man.run_dir)
    if cmd == "export-grid":
        g = load_checkpoint(cfg.generator_ckpt, expect="generator")
        n = cfg.raw["grid"]["n_images"]
        x = load_domain(cfg, cfg.target, "test").images[:n]
        with torch.no_grad():
            xt = g(x)
        src = load_domain(cfg, cfg.source, "test").images[:n] if cfg.synthetic else None
        path = export_grid(x, xt, man.run_dir / "grid.png", source=src)
        man.add("grid", path)
        return []
    raise ConfigError(f"command: unsupported {cmd!r}")


def _write_tables(rows, directory: Path, title: str, man: Optional[Manifest] = None):
    csv_path = write_results_csv(rows, directory / "results.csv")
    txt_path = directory / "results.txt"
    txt_path.write_text(format_table(rows))
    fig = plot_accuracy(rows, directory / "accuracy.png", title)
    if man is not None:
        for name, p in (("results_csv", csv_path), ("results_txt", txt_path), ("accuracy_plot", fig)):
            man.add(name, p)


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg`` for every seed. Returns the process exit status."""
    all_rows: list[EvalResult] = []
    for seed in cfg.seeds:
        run_dir = cfg.output_dir / cfg.run_id(seed)
        man = Manifest(run_dir, cfg, seed)
        try:
            rows = _run_seed(cfg, seed, man)
            if rows:
                _write_tables(rows, run_dir, f"{_pair(cfg)} seed {seed}", man)
            man.finish("done")
        except Exception as exc:
            log.error("run %s failed: %s", run_dir.name, exc)
            man.finish("failed", "".join(traceback.format_exception_only(type(exc), exc)).strip())
            print(f"error: {exc}", file=sys.stderr)
            return 1
        all_rows.extend(rows)
        print(format_table(rows), end="") if rows else print(f"seed {seed}: artifacts in {run_dir}")
    if all_rows and len(cfg.seeds) > 1:
        summary = cfg.output_dir / f"{cfg.command}-{cfg.config_hash()}-summary"
        summary.mkdir(parents=True, exist_ok=True)
        _write_tables(all_rows, summary, _pair(cfg))
        sig = significance(all_rows)
        if sig:
            (summary / "significance.json").write_text(json.dumps(sig, indent=2, sort_keys=True) + "\n")
        print(f"summary: {summary}")
    return 0


def significance(rows: list[EvalResult], baseline: str = "no_da") -> dict:
    """Paired t-test of every pipeline against ``baseline`` (pairing by seed)."""
    by = {}
    for r in rows:
        by.setdefault(r.pipeline, {})[r.seed] = r.accuracy
    out = {}
    if baseline not in by:
        return out
    for name, accs in by.items():
        if name == baseline:
            continue
        seeds = sorted(set(accs) & set(by[baseline]))
        if len(seeds) < 2:
            continue
        rep = paired_t_test([accs[s] for s in seeds], [by[baseline][s] for s in seeds])
        out[f"{name}_vs_{baseline}"] = {"seeds": seeds, "mean_diff": rep.mean_diff,
                                        "t_stat": rep.t_stat, "p_value": rep.p_value}
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sourcefree", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML experiment file; flags override its values")
    p.add_argument("--command", choices=None)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int, help="generator training epochs")
    p.add_argument("--source-epochs", dest="source_epochs", type=int)
    p.add_argument("--lr", type=float, help="generator learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda-content", dest="lambda_content", type=float)
    p.add_argument("--lambda-style", dest="lambda_style", type=float)
    p.add_argument("--lambda-entropy", dest="lambda_entropy", type=float)
    p.add_argument("--classifier-ckpt", dest="classifier_ckpt")
    p.add_argument("--generator-ckpt", dest="generator_ckpt")
    p.add_argument("--subsample", type=float, help="fraction of each training set to use")
    p.add_argument("--no-grad-clip", dest="no_grad_clip", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    overrides = {FLAG_KEYS[k]: v for k, v in vars(args).items() if k in FLAG_KEYS}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print("invalid configuration:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return 2
    if args.no_grad_clip:
        cfg.train = cfg.train.with_(grad_clip=None)
        cfg.raw["train"]["grad_clip"] = None
    torch.use_deterministic_algorithms(True)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
