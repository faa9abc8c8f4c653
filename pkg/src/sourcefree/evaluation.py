"""Accuracy, paired significance testing, loss ablations and result tables."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import special

from .data import Dataset, batches
from .errors import ContractError
from .losses import LossWeights
from .models import SourceClassifier, classifier_forward
from .training import TrainConfig, train_generator

PIPELINES = ("no_da", "translate", "adabn", "finetune", "translate_finetune")
ABLATIONS = {
    # name: (content, style, entropy) switches
    "no_da": None,
    "no_content": (False, True, True),
    "no_style": (True, False, True),
    "no_entropy": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class EvalResult:
    accuracy: float
    n_correct: int
    n_total: int
    pipeline: str = "no_da"
    seed: int = 0
    pair: str = ""

    def row(self) -> dict:
        return asdict(self)


def predict(model: SourceClassifier, g, data: Dataset, batch_size: int = 256) -> torch.Tensor:
    preds = []
    with torch.no_grad():
        for x, _ in batches(data, batch_size, mode="eval", with_labels=False):
            if g is not None:
                x = g(x)
            preds.append(classifier_forward(model, x).logits.argmax(dim=1))
    return torch.cat(preds)


def evaluate(model: SourceClassifier, g, test: Dataset, pipeline: Optional[str] = None,
             seed: int = 0, pair: str = "", batch_size: int = 256) -> EvalResult:
    """Top-1 accuracy on ``test``, translating each batch with ``g`` when given."""
    if model.bn_adapted and g is not None:
        raise ContractError(
            "AdaBN adapts the classifier toward the target while translation adapts images "
            "toward the source; the two cannot be combined")
    if pipeline is None:
        pipeline = "translate" if g is not None else ("adabn" if model.bn_adapted else "no_da")
    was_training = g.training if g is not None else False
    if g is not None:
        g.eval()
    try:
        preds = predict(model, g, test, batch_size)
    finally:
        if g is not None and was_training:
            g.train()
    correct = int((preds == test.labels).sum())
    return EvalResult(correct / len(test), correct, len(test), pipeline, seed, pair)


@dataclass
class SignificanceReport:
    runs_a: list
    runs_b: list
    mean_diff: float
    t_stat: float
    p_value: float
    test: str = "paired_t"


def paired_t_test(runs_a: Sequence[float], runs_b: Sequence[float]) -> SignificanceReport:
    """Two-sided paired t-test on per-seed differences a - b.

    Degenerate cases: zero-variance differences give p = 1 when their mean is
    zero and p = 0 otherwise.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ContractError("paired_t_test needs two equal-length sequences of >= 2 runs")
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # differences equal up to rounding count as zero variance
    if sd <= 1e-12 * max(1.0, abs(mean)):
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        p = 1.0 if mean == 0 else 0.0
    else:
        t = mean / (sd / math.sqrt(n))
        p = float(2.0 * special.stdtr(n - 1, -abs(t)))
    return SignificanceReport(a.tolist(), b.tolist(), mean, t, min(max(p, 0.0), 1.0))


def ablation_weights(base: LossWeights) -> dict:
    out = {}
    for name, switches in ABLATIONS.items():
        if switches is None:
            continue
        vals = [v if on else 0.0 for v, on in zip(base.as_tuple(), switches)]
        out[name] = LossWeights(*vals)
    return out


def run_ablation(target: Dataset, model: SourceClassifier, cfg: TrainConfig,
                 test: Dataset, gen_arch: Optional[dict] = None, pair: str = "",
                 metrics_dir=None) -> list[EvalResult]:
    """No-DA row plus one generator per loss-removal variant, in a fixed order.

    Rows come out as no_da, no_content, no_style, no_entropy, full.
    """
    from .training import MetricsLog

    rows = [evaluate(model, None, test, "no_da", cfg.seed, pair)]
    for name, w in ablation_weights(cfg.weights).items():
        metrics = MetricsLog(Path(metrics_dir) / f"metrics_{name}.csv") if metrics_dir else None
        g = train_generator(target, model, cfg.with_(weights=w, checkpoint_dir=None),
                            gen_arch=gen_arch, metrics=metrics)
        rows.append(evaluate(model, g, test, name, cfg.seed, pair))
    return rows


# --------------------------------------------------------------------------
# tables

TABLE_COLUMNS = ("pipeline", "pair", "seed", "accuracy", "n_correct", "n_total")


def write_results_csv(results: Sequence[EvalResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in results:
            w.writerow([r.pipeline, r.pair, r.seed, f"{r.accuracy:.6f}", r.n_correct, r.n_total])
    return path


def format_table(results: Sequence[EvalResult]) -> str:
    """Aligned text table, accuracies in percent."""
    header = ("pipeline", "pair", "seed", "accuracy")
    body = [(r.pipeline, r.pair, str(r.seed), f"{100 * r.accuracy:.1f}") for r in results]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join([b[0].ljust(widths[0]), b[1].ljust(widths[1]),
                                b[2].rjust(widths[2]), b[3].rjust(widths[3])]))
    return "\n".join(lines) + "\n"


def mean_by_pipeline(results: Sequence[EvalResult]) -> dict:
    acc: dict[str, list] = {}
    for r in results:
        acc.setdefault(r.pipeline, []).append(r.accuracy)
    return {k: sum(v) / len(v) for k, v in acc.items()}
