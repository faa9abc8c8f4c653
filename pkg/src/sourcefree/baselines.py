"""Source-free baselines: AdaBN, pseudo-label mining and pseudo-label fine-tuning."""
from __future__ import annotations

import copy
import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .data import Dataset, batches
from .errors import ContractError
from .models import SourceClassifier, classifier_forward
from .training import TrainConfig, finetune_config, fit_classifier

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.95


@dataclass
class PseudoLabelSet:
    indices: torch.Tensor
    labels: torch.Tensor
    confidences: torch.Tensor
    threshold: float = DEFAULT_THRESHOLD

    def __len__(self):
        return len(self.indices)

    def save_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "confidence"])
            for i, y, c in zip(self.indices.tolist(), self.labels.tolist(), self.confidences.tolist()):
                w.writerow([i, y, repr(c)])

    @classmethod
    def load_csv(cls, path, threshold: float = DEFAULT_THRESHOLD) -> "PseudoLabelSet":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls(torch.tensor([int(r["index"]) for r in rows], dtype=torch.int64),
                   torch.tensor([int(r["label"]) for r in rows], dtype=torch.int64),
                   torch.tensor([float(r["confidence"]) for r in rows]), threshold)


def _copy(model: SourceClassifier) -> SourceClassifier:
    clone = copy.deepcopy(model)
    clone.frozen = False
    return clone


def adabn(model: SourceClassifier, target: Dataset, batch_size: int = 256) -> SourceClassifier:
    """Copy of ``model`` whose BN statistics are recomputed on ``target``.

    Layers are re-estimated in order, so the inputs to layer n are produced
    with layers 1..n-1 already normalized by target statistics. Mean and
    variance are exact dataset statistics (variance with Bessel correction, as
    BN stores it). Labels are not read.
    """
    out = _copy(model)
    out.eval()
    for n, bn in enumerate(out.bns):
        total, sq, count = 0.0, 0.0, 0
        with torch.no_grad():
            for x, _ in batches(target, batch_size, mode="eval", with_labels=False):
                h = out.trace(x).bn_inputs[n].double()
                total = total + h.sum(dim=(0, 2, 3))
                sq = sq + (h * h).sum(dim=(0, 2, 3))
                count += h.shape[0] * h.shape[2] * h.shape[3]
        mean = total / count
        var = (sq / count - mean * mean).clamp_min(0) * count / max(count - 1, 1)
        bn.running_mean.copy_(mean.float())
        bn.running_var.copy_(var.float())
    out.freeze()
    out.bn_adapted = True
    return out


def _predict(model, target: Dataset, g=None, batch_size: int = 256) -> torch.Tensor:
    probs = []
    with torch.no_grad():
        for x, _ in batches(target, batch_size, mode="eval", with_labels=False):
            if g is not None:
                x = g(x)
            probs.append(classifier_forward(model, x).probs)
    return torch.cat(probs)


def mine_pseudo_labels(model: SourceClassifier, g, target: Dataset,
                       threshold: float = DEFAULT_THRESHOLD, batch_size: int = 256) -> PseudoLabelSet:
    """Confident target predictions, optionally gated by agreement with the translated image.

    Without ``g``: keep samples whose max softmax on x exceeds ``threshold``.
    With ``g``: additionally require argmax p(x) == argmax p(g(x)); confidence
    is then the max softmax of p(g(x)) and must also exceed ``threshold``.
    """
    if model.bn_adapted and g is not None:
        raise ContractError("AdaBN-adapted classifiers cannot be combined with translation")
    p = _predict(model, target, None, batch_size)
    conf, label = p.max(dim=1)
    keep = conf > threshold
    if g is not None:
        pt = _predict(model, target, g, batch_size)
        conf_t, label_t = pt.max(dim=1)
        keep = keep & (label == label_t) & (conf_t > threshold)
        conf = conf_t
    idx = torch.nonzero(keep).flatten()
    log.info("mined %d / %d pseudo labels (threshold %.2f, agreement=%s)",
             len(idx), len(target), threshold, g is not None)
    return PseudoLabelSet(idx, label[idx], conf[idx], threshold)


def finetune(model: SourceClassifier, target: Dataset, pseudo: PseudoLabelSet,
             cfg: Optional[TrainConfig] = None) -> SourceClassifier:
    """Fine-tuned copy of ``model`` on (original target image, pseudo label) pairs."""
    cfg = cfg or finetune_config()
    out = _copy(model)
    if len(pseudo) == 0:
        warnings.warn("empty pseudo-label set; returning an unmodified copy", RuntimeWarning)
        out.freeze()
        return out
    out.unfreeze()
    subset = Dataset(target.images[pseudo.indices], pseudo.labels, target.domain_name,
                     target.split, target.num_classes)
    fit_classifier(out, subset, cfg)
    out.freeze()
    return out
