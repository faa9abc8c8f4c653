"""Figures written next to the CSV outputs: image grids, loss curves, accuracy bars."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimg  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .errors import ContractError  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
# fixed metadata keeps figure bytes reproducible
PNG_META = {"Software": None}

LOSS_COLORS = {"content": "#1b9e77", "style": "#d95f02", "entropy": "#7570b3", "total": "#333333"}


def _to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().cpu().clamp(0, 1).numpy()
    return np.round(arr * 255).astype(np.uint8)


def grid_array(x: torch.Tensor, x_translated: torch.Tensor,
               source: Optional[torch.Tensor] = None) -> np.ndarray:
    """(rows*H, n*W, 3) uint8 mosaic: originals, translations, optional source samples."""
    if x.shape != x_translated.shape or x.ndim != 4:
        raise ContractError(f"grid rows need equal shapes, got {tuple(x.shape)} and {tuple(x_translated.shape)}")
    rows = [x, x_translated]
    if source is not None:
        if source.shape[1:] != x.shape[1:]:
            raise ContractError("source samples must share (C, H, W) with the target batch")
        rows.append(source[: x.shape[0]])
    n, c, h, w = x.shape
    out = np.zeros((len(rows) * h, n * w, 3), dtype=np.uint8)
    for r, batch in enumerate(rows):
        tiles = _to_uint8(batch)
        if c == 1:
            tiles = np.repeat(tiles, 3, axis=1)
        for i in range(tiles.shape[0]):
            out[r * h:(r + 1) * h, i * w:(i + 1) * w] = tiles[i].transpose(1, 2, 0)
    return out


def export_grid(x: torch.Tensor, x_translated: torch.Tensor, path,
                source: Optional[torch.Tensor] = None) -> Path:
    """Write the mosaic from ``grid_array`` as a lossless PNG."""
    path = Path(path)
    arr = grid_array(x, x_translated, source)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        mpimg.imsave(path, arr, format="png", metadata=PNG_META)
    except OSError as exc:
        raise OSError(f"cannot write image grid to {path}: {exc}") from exc
    return path


def read_grid(path) -> np.ndarray:
    """Read a grid PNG back as (H, W, 3) uint8."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def plot_loss_curves(rows: Sequence[dict], path, title: str = "") -> Path:
    """Per-step loss components on a log scale."""
    path = Path(path)
    steps = [int(r["step"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for key, color in LOSS_COLORS.items():
            vals = np.asarray([float(r[key]) for r in rows])
            if np.any(vals > 0):
                ax.plot(steps, np.clip(vals, 1e-12, None), label=key, color=color, lw=1.0)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=4, loc="upper right")
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata=PNG_META)
        plt.close(fig)
    return path


def plot_accuracy(results, path, title: str = "") -> Path:
    """Mean accuracy per pipeline as bars, individual seeds as dots."""
    path = Path(path)
    order: list[str] = []
    per: dict[str, list] = {}
    for r in results:
        if r.pipeline not in per:
            order.append(r.pipeline)
            per[r.pipeline] = []
        per[r.pipeline].append(100 * r.accuracy)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(order), 3.0))
        xs = np.arange(len(order))
        ax.bar(xs, [np.mean(per[k]) for k in order], color="#9ecae1", edgecolor="#3182bd", width=0.6)
        for i, k in enumerate(order):
            ax.plot(np.full(len(per[k]), xs[i]), per[k], "o", color="#08519c", ms=3)
        ax.set_xticks(xs, order, rotation=30, ha="right")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.set_ylim(0, 100)
        if title:
            ax.set_title(title)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, metadata=PNG_META)
        plt.close(fig)
    return path
