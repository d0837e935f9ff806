"""Post-hoc probes of channel activations (dead, saturated and redundant channels)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError
from .network import Network, layer_names
from .tensor import Tensor, no_grad

DEAD_THRESHOLD = 1e-4
SATURATION_LEVEL = 0.99
SATURATION_FRACTION = 0.99


@dataclass
class ActivationStats:
    layer: str
    mean_abs: np.ndarray
    variance: np.ndarray
    dead: np.ndarray
    saturated: np.ndarray
    mean_cosine: float

    @property
    def channels(self) -> int:
        return int(self.mean_abs.size)

    @property
    def dead_fraction(self) -> float:
        return float(self.dead.mean())

    @property
    def saturated_fraction(self) -> float:
        return float(self.saturated.mean())


def feature_stats(
    fmap: np.ndarray,
    layer: str = "",
    dead_threshold: float = DEAD_THRESHOLD,
    saturation_level: float = SATURATION_LEVEL,
) -> ActivationStats:
    """Statistics of a ``[B, C, D, H, W]`` (or ``[C, D, H, W]``) feature map.

    Per channel, voxels from all samples are pooled. A channel is dead when its
    mean absolute activation is below ``dead_threshold`` and saturated when more
    than 99% of its voxels exceed ``saturation_level`` times its maximum
    absolute activation.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 4:
        fmap = fmap[None]
    if fmap.ndim != 5:
        raise ContractError(f"feature map must be 4-D or 5-D, got {fmap.shape}")
    c = fmap.shape[1]
    flat = np.moveaxis(fmap, 1, 0).reshape(c, -1)
    mags = np.abs(flat)
    mean_abs = mags.mean(axis=1)
    variance = flat.var(axis=1)
    peak = mags.max(axis=1)
    above = mags > saturation_level * peak[:, None]
    saturated = (peak > 0) & (above.mean(axis=1) > SATURATION_FRACTION)
    dead = mean_abs < dead_threshold
    return ActivationStats(layer, mean_abs, variance, dead, saturated, _mean_pairwise_cosine(flat))


def _mean_pairwise_cosine(flat: np.ndarray) -> float:
    c = flat.shape[0]
    if c < 2:
        return 1.0
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = flat / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    iu = np.triu_indices(c, 1)
    return float(sim[iu].mean())


def capture_layer(net: Network, patch, layer: str, bypass_grn: bool = False) -> np.ndarray:
    if layer not in layer_names(net):
        raise ContractError(f"unknown layer {layer!r}")
    captured: dict[str, np.ndarray] = {}
    with no_grad():
        x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=np.float32))
        net(x, bypass_grn=bypass_grn, capture=captured)
    return captured[layer]


def activation_stats(net: Network, patch, layer: str, bypass_grn: bool = False, **kw) -> ActivationStats:
    """Run ``patch`` through ``net`` and summarise the selected layer's output."""
    return feature_stats(capture_layer(net, patch, layer, bypass_grn), layer, **kw)


def write_stats_csv(stats: Sequence[ActivationStats], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "channels", "dead_fraction", "saturated_fraction", "mean_cosine", "mean_abs", "mean_variance"])
        for s in stats:
            w.writerow([s.layer, s.channels, repr(s.dead_fraction), repr(s.saturated_fraction), repr(s.mean_cosine),
                        repr(float(s.mean_abs.mean())), repr(float(s.variance.mean()))])
    return path


def activation_grid(fmap: np.ndarray) -> np.ndarray:
    """Tile the central depth slice of every channel into a uint8 grid.

    Channels are min-max scaled independently; constant channels render as 128.
    The grid has ``ceil(sqrt(C))`` columns.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim == 5:
        fmap = fmap[0]
    if fmap.ndim != 4:
        raise ContractError(f"feature map must be [C, D, H, W], got {fmap.shape}")
    c, d, h, w = fmap.shape
    cols = math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        sl = fmap[i, d // 2]
        lo, hi = sl.min(), sl.max()
        if hi > lo:
            tile = np.rint(255.0 * (sl - lo) / (hi - lo)).astype(np.uint8)
        else:
            tile = np.full(sl.shape, 128, dtype=np.uint8)
        r, q = divmod(i, cols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = tile
    return grid


def write_pgm(image: np.ndarray, path) -> Path:
    """Binary portable graymap (P5, maxval 255)."""
    image = np.asarray(image, dtype=np.uint8)
    path = Path(path)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + image.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ContractError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def export_activation_grid(net: Network, patch, layer: str, path, bypass_grn: bool = False) -> Path:
    return write_pgm(activation_grid(capture_layer(net, patch, layer, bypass_grn)), path)
