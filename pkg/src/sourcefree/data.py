"""Dataset ingestion, synthetic domain pairs and batch streams.

Every domain is delivered as float32 tensors of shape (N, 3, 32, 32) with
values in [0, 1]. Grayscale sources are replicated to three channels.
"""
from __future__ import annotations

import bz2
import gzip
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, IngestionError

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
DIGIT_DATASETS = ("mnist", "usps", "svhn")
SHIFTS = ("color_tint", "brightness", "saturation")

# additive per-channel offset of the color_tint shift
DEFAULT_TINT = (0.25, -0.08, 0.2)
DEFAULT_BRIGHTNESS = 1.35
DEFAULT_SATURATION = 0.15


class Dataset:
    """Images plus labels, with a counter on label access.

    Labels sit behind the ``labels`` property so that code paths which must not
    look at target labels (generator training, pseudo-label mining) can be
    audited through ``label_reads``.
    """

    def __init__(self, images: torch.Tensor, labels, domain_name: str,
                 split: str = "train", num_classes: int = 10):
        if images.ndim != 4:
            raise ContractError(f"images must be (N, C, H, W), got {tuple(images.shape)}")
        labels = torch.as_tensor(labels, dtype=torch.int64)
        if labels.shape != (images.shape[0],):
            raise ContractError(
                f"{images.shape[0]} images but labels have shape {tuple(labels.shape)}")
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            raise ContractError(f"labels outside [0, {num_classes})")
        self.images = images
        self._labels = labels
        self.domain_name = domain_name
        self.split = split
        self.num_classes = num_classes
        self.label_reads = 0

    @property
    def labels(self) -> torch.Tensor:
        self.label_reads += 1
        return self._labels

    def __len__(self) -> int:
        return self.images.shape[0]

    def __repr__(self) -> str:
        c, h, w = self.images.shape[1:]
        return f"Dataset({self.domain_name!r}, split={self.split!r}, n={len(self)}, shape=({c}, {h}, {w}))"

    def subset(self, indices) -> "Dataset":
        """Rows ``indices`` as a new dataset. Does not count as a label read."""
        idx = torch.as_tensor(indices, dtype=torch.int64)
        return Dataset(self.images[idx], self._labels[idx], self.domain_name,
                       self.split, self.num_classes)

    def subsample(self, fraction: float, seed: int = 0) -> "Dataset":
        """Deterministic random subset holding ``fraction`` of the rows."""
        if not 0 < fraction <= 1:
            raise ConfigError(f"subsample fraction must be in (0, 1], got {fraction}")
        if fraction == 1:
            return self
        g = torch.Generator().manual_seed(seed)
        n = max(1, int(round(len(self) * fraction)))
        idx = torch.randperm(len(self), generator=g)[:n].sort().values
        return self.subset(idx)


@dataclass
class DomainPair:
    source: Dataset
    target: Dataset
    shared_classes: int = field(default=10)

    def __post_init__(self):
        if self.source.num_classes != self.target.num_classes:
            raise ContractError("source and target must share the same label set")
        self.shared_classes = self.source.num_classes


# --------------------------------------------------------------------------
# native formats


def _open_maybe_gz(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _find(root: Path, names) -> Path:
    for name in names:
        p = root / name
        if p.exists():
            return p
    tried = f" (also tried {', '.join(names[1:])})" if len(names) > 1 else ""
    raise IngestionError(f"dataset file not found: {root / names[0]}{tried}")


def read_idx(path: Path) -> np.ndarray:
    """Parse an IDX file (MNIST): images (magic 0x803) or labels (0x801)."""
    try:
        with _open_maybe_gz(path) as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 8:
        raise IngestionError(f"corrupt IDX file {path}: truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic == 0x00000801:
        shape = (count,)
        offset = 8
    elif magic == 0x00000803:
        if len(raw) < 16:
            raise IngestionError(f"corrupt IDX file {path}: truncated header")
        rows, cols = struct.unpack(">II", raw[8:16])
        shape = (count, rows, cols)
        offset = 16
    else:
        raise IngestionError(f"corrupt IDX file {path}: bad magic 0x{magic:08x}")
    expected = int(np.prod(shape))
    if len(raw) - offset != expected:
        raise IngestionError(
            f"corrupt IDX file {path}: expected {expected} data bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(shape)


def _load_mnist(root: Path, split: str):
    prefix = "train" if split == "train" else "t10k"
    img_path = _find(root, [f"{prefix}-images-idx3-ubyte", f"{prefix}-images-idx3-ubyte.gz",
                            f"{prefix}-images.idx3-ubyte"])
    lbl_path = _find(root, [f"{prefix}-labels-idx1-ubyte", f"{prefix}-labels-idx1-ubyte.gz",
                            f"{prefix}-labels.idx1-ubyte"])
    images = read_idx(img_path)
    labels = read_idx(lbl_path)
    if images.ndim != 3 or labels.ndim != 1:
        raise IngestionError(f"unexpected IDX kinds in {img_path} / {lbl_path}")
    if len(images) != len(labels):
        raise IngestionError(f"{img_path} has {len(images)} images but {lbl_path} has {len(labels)} labels")
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    return x, labels.astype(np.int64)


def _load_usps(root: Path, split: str):
    # libsvm text: "<label 1..10> 1:<v> 2:<v> ... 256:<v>", values in [-1, 1]
    path = _find(root, ["usps.bz2", "usps"] if split == "train" else ["usps.t.bz2", "usps.t"])
    opener = bz2.open if path.suffix == ".bz2" else open
    images, labels = [], []
    try:
        with opener(path, "rt") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                row = np.zeros(256, dtype=np.float32)
                for item in parts[1:]:
                    k, v = item.split(":")
                    row[int(k) - 1] = float(v)
                labels.append(int(float(parts[0])) - 1)
                images.append(row)
    except (OSError, EOFError, ValueError, IndexError) as exc:
        raise IngestionError(f"corrupt USPS file {path}: {exc}") from exc
    if not images:
        raise IngestionError(f"corrupt USPS file {path}: no records")
    x = (np.stack(images).reshape(-1, 1, 16, 16) + 1.0) / 2.0
    return torch.from_numpy(np.clip(x, 0.0, 1.0)), np.asarray(labels, dtype=np.int64)


def _load_svhn(root: Path, split: str):
    import scipy.io

    path = _find(root, [f"{split}_32x32.mat"])
    try:
        mat = scipy.io.loadmat(path)
        X, y = mat["X"], mat["y"]
    except Exception as exc:  # scipy raises a zoo of types on bad files
        raise IngestionError(f"corrupt SVHN file {path}: {exc}") from exc
    # X: (32, 32, 3, N) uint8; y: (N, 1) with digit 0 stored as 10
    x = torch.from_numpy(np.ascontiguousarray(X.transpose(3, 2, 0, 1)).astype(np.float32) / 255.0)
    labels = y.reshape(-1).astype(np.int64) % 10
    return x, labels


_LOADERS = {"mnist": _load_mnist, "usps": _load_usps, "svhn": _load_svhn}


def to_standard(x: torch.Tensor) -> torch.Tensor:
    """Resize to 32x32 and replicate grayscale to three channels."""
    if x.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        out = torch.empty(x.shape[0], x.shape[1], IMAGE_SIZE, IMAGE_SIZE)
        for i in range(0, x.shape[0], 4096):
            out[i:i + 4096] = F.interpolate(x[i:i + 4096], size=(IMAGE_SIZE, IMAGE_SIZE),
                                            mode="bilinear", align_corners=False)
        x = out.clamp_(0.0, 1.0)
    if x.shape[1] == 1:
        # a view: the three channels share storage
        x = x.expand(-1, 3, -1, -1)
    return x


def load_digit_dataset(name: str, split: str, root) -> Dataset:
    """Load MNIST, USPS or SVHN from its native files under ``root``.

    Expected files: MNIST IDX (``train-images-idx3-ubyte[.gz]`` etc.), USPS
    libsvm archives (``usps.bz2``, ``usps.t.bz2``), SVHN MATLAB files
    (``train_32x32.mat``, ``test_32x32.mat``). A per-dataset subdirectory
    (``root/mnist`` ...) is searched first.
    """
    if name not in _LOADERS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {', '.join(DIGIT_DATASETS)}")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}; expected 'train' or 'test'")
    root = Path(root)
    base = root / name if (root / name).is_dir() else root
    x, y = _LOADERS[name](base, split)
    log.info("loaded %s/%s: %d images", name, split, len(y))
    return Dataset(to_standard(x), y, name, split)


# --------------------------------------------------------------------------
# synthetic shapes


def _glyph_mask(cls: int, yy, xx, thick):
    r = np.hypot(xx, yy)
    ax, ay = np.abs(xx), np.abs(yy)
    if cls == 0:  # disk
        return r < 0.55
    if cls == 1:  # ring
        return np.abs(r - 0.5) < thick
    if cls == 2:  # filled square
        return np.maximum(ax, ay) < 0.45
    if cls == 3:  # hollow square
        return np.abs(np.maximum(ax, ay) - 0.45) < thick
    if cls == 4:  # triangle
        return (yy < 0.45) & (yy > 1.7 * ax - 0.6)
    if cls == 5:  # plus
        return ((ax < thick) & (ay < 0.6)) | ((ay < thick) & (ax < 0.6))
    if cls == 6:  # x
        d1, d2 = np.abs(xx - yy), np.abs(xx + yy)
        return ((d1 < 1.4 * thick) | (d2 < 1.4 * thick)) & (np.maximum(ax, ay) < 0.5)
    if cls == 7:  # two horizontal bars
        return (np.abs(ay - 0.3) < thick) & (ax < 0.6)
    if cls == 8:  # vertical bar
        return (ax < 1.2 * thick) & (ay < 0.65)
    if cls == 9:  # diamond outline
        return np.abs(ax + ay - 0.55) < thick
    raise ValueError(cls)


def _render(rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    n = len(labels)
    coords = (np.arange(IMAGE_SIZE) + 0.5) / IMAGE_SIZE * 2 - 1
    gy, gx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i, cls in enumerate(labels):
        cy, cx = rng.uniform(-0.15, 0.15, size=2)
        scale = rng.uniform(0.8, 1.15)
        theta = rng.uniform(-0.3, 0.3)
        thick = rng.uniform(0.07, 0.12)
        c, s = math.cos(theta), math.sin(theta)
        xx = ((gx - cx) * c + (gy - cy) * s) / scale
        yy = (-(gx - cx) * s + (gy - cy) * c) / scale
        mask = _glyph_mask(int(cls), yy, xx, thick).astype(np.float32)
        bg = rng.uniform(0.18, 0.32, size=3).astype(np.float32)
        fg = rng.uniform(0.45, 0.6, size=3).astype(np.float32)
        img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
        img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
        out[i] = img
    # headroom so that every shift below stays inside [0, 1] without clipping
    return np.clip(out, 0.1, 0.7)


def apply_shift(x: torch.Tensor, shift: str, amount=None) -> torch.Tensor:
    """Photometric domain shift applied to images in [0.1, 0.7]."""
    if shift == "color_tint":
        tint = torch.tensor(DEFAULT_TINT if amount is None else amount, dtype=x.dtype)
        return x + tint.view(1, 3, 1, 1)
    if shift == "brightness":
        return x * (DEFAULT_BRIGHTNESS if amount is None else amount)
    if shift == "saturation":
        a = DEFAULT_SATURATION if amount is None else amount
        gray = x.mean(dim=1, keepdim=True)
        return gray + a * (x - gray)
    raise ConfigError(f"unknown shift {shift!r}; expected one of {', '.join(SHIFTS)}")


def make_synthetic_pair(seed: int, n_per_class: int, shift: str = "color_tint",
                        split: str = "train", num_classes: int = 10, amount=None) -> DomainPair:
    """Render a source/target pair of 10 shape classes that differ only by ``shift``.

    Source and target are independent draws from the same glyph distribution;
    the target draw then receives the photometric shift. Deterministic in
    (seed, n_per_class, split).
    """
    if n_per_class < 10:
        raise ConfigError(f"n_per_class must be >= 10, got {n_per_class}")
    if shift not in SHIFTS:
        raise ConfigError(f"unknown shift {shift!r}; expected one of {', '.join(SHIFTS)}")
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    if not 2 <= num_classes <= 10:
        raise ConfigError("synthetic pairs support 2..10 classes")
    ss = np.random.SeedSequence([seed, n_per_class, 0 if split == "train" else 1])
    rng_src, rng_tgt = (np.random.default_rng(s) for s in ss.spawn(2))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    datasets = []
    for rng, name in ((rng_src, "synth"), (rng_tgt, f"synth-{shift}")):
        y = rng.permutation(labels)
        x = torch.from_numpy(_render(rng, y))
        if name != "synth":
            x = apply_shift(x, shift, amount).clamp_(0.0, 1.0)
        datasets.append(Dataset(x, y, name, split, num_classes))
    return DomainPair(datasets[0], datasets[1])


# --------------------------------------------------------------------------
# batching


def _crop_flip(x: torch.Tensor, g: torch.Generator, pad: int = 4) -> torch.Tensor:
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=g)
    flips = torch.rand(n, generator=g) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        oy, ox = int(offs[i, 0]), int(offs[i, 1])
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out


def num_batches(n: int, batch_size: int, drop_last: bool) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def batches(dataset: Dataset, batch_size: int, shuffle_seed: Optional[int] = None,
            augment: str = "none", mode: str = "eval",
            with_labels: bool = True) -> Iterator[tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """One epoch of (images, labels) batches.

    ``mode="generator"`` drops the final short batch and requires
    ``batch_size >= 2``; ``mode="train"`` also drops it; ``mode="eval"`` keeps
    it. With ``with_labels=False`` labels are never touched and ``None`` is
    yielded in their place.
    """
    if mode not in ("eval", "train", "generator"):
        raise ConfigError(f"unknown batch mode {mode!r}")
    if batch_size < 1 or (mode == "generator" and batch_size < 2):
        raise ConfigError(f"batch_size must be >= 2 for generator training, got {batch_size}")
    if augment not in ("none", "crop_flip"):
        raise ConfigError(f"unknown augmentation {augment!r}")
    n = len(dataset)
    if shuffle_seed is None:
        order = torch.arange(n)
        g = torch.Generator().manual_seed(0)
    else:
        g = torch.Generator().manual_seed(shuffle_seed)
        order = torch.randperm(n, generator=g)
    labels = dataset.labels if with_labels else None
    drop_last = mode != "eval"
    for b in range(num_batches(n, batch_size, drop_last)):
        idx = order[b * batch_size:(b + 1) * batch_size]
        x = dataset.images[idx]
        if augment == "crop_flip":
            x = _crop_flip(x, g)
        yield x, (labels[idx] if labels is not None else None)
