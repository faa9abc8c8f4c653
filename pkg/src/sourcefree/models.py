"""Source classifier with batch-norm introspection, and the residual generator."""
from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, IngestionError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class LayerStats:
    mean: torch.Tensor
    std: torch.Tensor
    kind: str = "current"

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ContractError("mean and std must be 1-d vectors of equal length")

    @property
    def n_channels(self) -> int:
        return self.mean.shape[0]


@dataclass
class ClassifierTrace:
    """Intermediate quantities from one classifier pass.

    bn_inputs[n] is the activation entering BN layer n, before normalization.
    """
    bn_inputs: list
    last_features: torch.Tensor
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=1)

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


class SourceClassifier(nn.Module):
    """Three conv-BN-ReLU blocks, global average pooling and a linear head.

    ``widths`` defaults to (64, 128, 256). The first two blocks are followed by
    2x2 max pooling.
    """

    def __init__(self, num_classes: int = 10, widths: Sequence[int] = (64, 128, 256),
                 in_channels: int = 3, kernel_size: int = 5, image_size: int = 32):
        super().__init__()
        if len(widths) != 3:
            raise ContractError("the classifier has exactly three conv blocks")
        self.arch = {"num_classes": num_classes, "widths": list(widths),
                     "in_channels": in_channels, "kernel_size": kernel_size,
                     "image_size": image_size}
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.convs.append(nn.Conv2d(c, w, kernel_size, padding=kernel_size // 2, bias=False))
            self.bns.append(nn.BatchNorm2d(w, eps=BN_EPS, momentum=BN_MOMENTUM))
            c = w
        self.head = nn.Linear(c, num_classes)
        self.frozen = False
        # set on AdaBN copies; translation must not be applied on top of them
        self.bn_adapted = False

    @property
    def num_classes(self) -> int:
        return self.arch["num_classes"]

    def freeze(self) -> "SourceClassifier":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return super().train(False)

    def unfreeze(self) -> "SourceClassifier":
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def train(self, mode: bool = True):
        if mode and self.frozen:
            raise ContractError("classifier is frozen; copy it before training")
        return super().train(mode)

    def trace(self, x: torch.Tensor) -> ClassifierTrace:
        c, s = self.arch["in_channels"], self.arch["image_size"]
        if x.ndim != 4 or x.shape[1] != c or x.shape[2:] != (s, s):
            raise ContractError(f"expected input (B, {c}, {s}, {s}), got {tuple(x.shape)}")
        bn_inputs = []
        h = x
        for i, (conv, bn) in enumerate(zip(self.convs, self.bns)):
            h = conv(h)
            bn_inputs.append(h)
            h = F.relu(bn(h))
            if i < 2:
                h = F.max_pool2d(h, 2)
        feats = h.mean(dim=(2, 3))
        return ClassifierTrace(bn_inputs, feats, self.head(feats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trace(x).logits

    def stored_stats(self) -> list:
        """Running statistics of each BN layer; std = sqrt(running_var + eps)."""
        return [LayerStats(bn.running_mean.detach().clone(),
                           torch.sqrt(bn.running_var.detach() + bn.eps), kind="stored")
                for bn in self.bns]


def classifier_forward(model: SourceClassifier, x: torch.Tensor) -> ClassifierTrace:
    """Inference pass: BN layers normalize with their stored statistics."""
    if model.training:
        raise ContractError("classifier_forward needs a model in inference mode (call .eval() or .freeze())")
    return model.trace(x)


def current_stats(trace: ClassifierTrace, layer: int) -> LayerStats:
    """Per-channel batch mean and sqrt(population variance + eps) at a BN input."""
    h = trace.bn_inputs[layer]
    if h.shape[0] < 2:
        raise ContractError(f"batch statistics need at least 2 samples, got {h.shape[0]}")
    var, mean = torch.var_mean(h, dim=(0, 2, 3), unbiased=False)
    return LayerStats(mean, torch.sqrt(var + BN_EPS), kind="current")


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """CycleGAN-style residual translator.

    Stem, two stride-2 down convolutions, residual blocks, two transposed up
    convolutions, then an output convolution. The output convolution predicts a
    correction in logit space that is added to logit(x) before the sigmoid, so
    outputs stay in [0, 1] and a small correction means a near-identity map.
    """

    def __init__(self, channels: int = 3, width: int = 32, n_blocks: int = 4,
                 init_scale: float = 0.1, logit_eps: float = 1e-2):
        super().__init__()
        self.arch = {"channels": channels, "width": width, "n_blocks": n_blocks,
                     "init_scale": init_scale, "logit_eps": logit_eps}
        w = width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, w, 7), nn.InstanceNorm2d(w, affine=True),
                  nn.ReLU(inplace=True)]
        for mult in (1, 2):
            layers += [nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * mult * 2, affine=True), nn.ReLU(inplace=True)]
        layers += [ResidualBlock(w * 4) for _ in range(n_blocks)]
        for mult in (4, 2):
            layers += [nn.ConvTranspose2d(w * mult, w * mult // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(w * mult // 2, affine=True), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w, channels, 7))
        with torch.no_grad():
            self.out[1].weight.mul_(init_scale)
            self.out[1].bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        eps = self.arch["logit_eps"]
        base = torch.logit(x.clamp(eps, 1 - eps))
        return torch.sigmoid(base + self.out(self.body(x)))


def generator_forward(g: nn.Module, x: torch.Tensor) -> torch.Tensor:
    y = g(x)
    if y.shape != x.shape:
        raise ContractError(f"generator changed shape {tuple(x.shape)} -> {tuple(y.shape)}")
    return y


# --------------------------------------------------------------------------
# checkpoints and hashing


def state_hash(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state_dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(model: nn.Module, path, extra: Optional[dict] = None) -> str:
    kind = "classifier" if isinstance(model, SourceClassifier) else "generator"
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": dict(model.arch),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    if kind == "classifier":
        payload["stored_stats"] = [{"mean": s.mean, "std": s.std} for s in model.stored_stats()]
        payload["bn_adapted"] = model.bn_adapted
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return file_hash(path)


def load_checkpoint(path, expect: Optional[str] = None):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise IngestionError(f"unreadable checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise IngestionError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    kind = payload["kind"]
    if expect is not None and kind != expect:
        raise IngestionError(f"{path}: expected a {expect} checkpoint, found {kind}")
    if kind == "classifier":
        model = SourceClassifier(**payload["arch"])
        stats = payload["stored_stats"]
        if len(stats) != len(model.bns):
            raise IngestionError(f"{path}: {len(stats)} stored stats for {len(model.bns)} BN layers")
        for n, (s, bn) in enumerate(zip(stats, model.bns)):
            if s["mean"].shape[0] != bn.num_features or s["std"].shape[0] != bn.num_features:
                raise IngestionError(
                    f"{path}: BN layer {n} has {bn.num_features} channels but stored stats have {s['mean'].shape[0]}")
        model.load_state_dict(payload["state_dict"])
        model.bn_adapted = payload.get("bn_adapted", False)
        model.freeze()
    else:
        model = Generator(**payload["arch"])
        model.load_state_dict(payload["state_dict"])
        model.eval()
    return model
