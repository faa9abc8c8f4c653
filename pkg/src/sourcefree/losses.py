"""Content, style and entropy losses for translating target images toward source style."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ContractError
from .models import ClassifierTrace, classifier_forward, current_stats, generator_forward

PROB_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    content: float = 1.0
    style: float = 10.0
    entropy: float = 0.1

    def __post_init__(self):
        for name in ("content", "style", "entropy"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ContractError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self):
        return (self.content, self.style, self.entropy)


@dataclass
class LossReport:
    content: torch.Tensor
    style: torch.Tensor
    entropy: torch.Tensor
    total: torch.Tensor

    def values(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("content", "style", "entropy", "total")}


def content_loss(trace_translated: ClassifierTrace, trace_original: ClassifierTrace) -> torch.Tensor:
    """Batch mean of ||f_N(x~) - f_N(x)||_2; the original side is detached."""
    a = trace_translated.last_features
    b = trace_original.last_features.detach()
    if a.shape != b.shape:
        raise ContractError(f"trace shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a - b
    # sqrt has an infinite derivative at 0; route exact zeros through a safe branch
    sq = (diff * diff).sum(dim=1)
    zero = sq == 0
    norm = torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))
    return norm.mean()


def style_loss(trace_translated: ClassifierTrace, stored) -> torch.Tensor:
    """Layer average of ||mu_cur - mu_stored||_2 + ||sigma_cur - sigma_stored||_2."""
    if len(stored) != len(trace_translated.bn_inputs):
        raise ContractError(
            f"{len(stored)} stored stats for {len(trace_translated.bn_inputs)} BN layers")
    terms = []
    for n, ref in enumerate(stored):
        cur = current_stats(trace_translated, n)
        if cur.n_channels != ref.n_channels:
            raise ContractError(
                f"layer {n}: current stats have {cur.n_channels} channels, stored have {ref.n_channels}")
        terms.append(torch.linalg.vector_norm(cur.mean - ref.mean)
                     + torch.linalg.vector_norm(cur.std - ref.std))
    return torch.stack(terms).mean()


def entropy_loss(probs: torch.Tensor) -> torch.Tensor:
    """Batch mean of the Shannon entropy (nats), with probabilities floored at 1e-8."""
    if (probs < 0).any():
        raise ContractError("probabilities must be non-negative")
    return -(probs * torch.log(probs.clamp_min(PROB_FLOOR))).sum(dim=1).mean()


def combine(content, style, entropy, w: LossWeights) -> LossReport:
    total = w.content * content + w.style * style + w.entropy * entropy
    return LossReport(content, style, entropy, total)


def total_loss(x: torch.Tensor, g, model, w: LossWeights, stored=None) -> LossReport:
    """Translate ``x`` with ``g`` and score it against the frozen classifier.

    Classifier parameters are expected to have ``requires_grad=False``; gradients
    of ``total`` then reach only the generator.
    """
    if stored is None:
        stored = model.stored_stats()
    x_t = generator_forward(g, x)
    with torch.no_grad():
        tr_x = classifier_forward(model, x)
    tr_t = classifier_forward(model, x_t)
    return combine(content_loss(tr_t, tr_x), style_loss(tr_t, stored),
                   entropy_loss(tr_t.probs), w)
