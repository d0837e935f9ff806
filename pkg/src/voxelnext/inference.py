"""Gaussian-weighted sliding-window prediction over whole volumes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import VolumeSample
from .errors import ContractError
from .network import Network, check_patch_shape
from .ops import softmax_channels
from .tensor import Tensor, no_grad


def gaussian_weight_map(patch_size, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Separable Gaussian centred at ``(n - 1) / 2`` per axis, peak 1, floored at ``1e-3``."""
    if sigma_scale <= 0:
        raise ContractError(f"sigma_scale must be positive, got {sigma_scale}")
    axes = []
    for n in patch_size:
        sigma = n * sigma_scale
        d = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-(d * d) / (2.0 * sigma * sigma)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    return np.maximum(w, 1e-3)


def _axis_origins(extent: int, patch: int, step: int) -> list[int]:
    if extent <= patch:
        return [0]
    n = math.ceil((extent - patch) / step) + 1
    return sorted({int(round(v)) for v in np.linspace(0, extent - patch, n)})


@dataclass
class WindowPlan:
    patch_size: tuple[int, int, int]
    step: tuple[int, int, int]
    origins: list[tuple[int, int, int]]
    weight_map: np.ndarray
    padded_extents: tuple[int, int, int]

    def coverage(self) -> np.ndarray:
        """Number of windows covering each voxel of the padded volume."""
        count = np.zeros(self.padded_extents, dtype=np.int64)
        for o in self.origins:
            count[tuple(slice(a, a + p) for a, p in zip(o, self.patch_size))] += 1
        return count


def plan_windows(extents, patch_size, overlap: float = 0.5, sigma_scale: float = 1.0 / 8) -> WindowPlan:
    if not 0.0 <= overlap < 1.0:
        raise ContractError(f"overlap must lie in [0, 1), got {overlap}")
    patch_size = tuple(int(p) for p in patch_size)
    padded = tuple(max(n, p) for n, p in zip(extents, patch_size))
    step = tuple(max(1, int(p * (1.0 - overlap))) for p in patch_size)
    per_axis = [_axis_origins(n, p, s) for n, p, s in zip(padded, patch_size, step)]
    origins = [(a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]]
    return WindowPlan(patch_size, step, origins, gaussian_weight_map(patch_size, sigma_scale), padded)


def sliding_window_predict(
    net: Network,
    volume,
    patch_size,
    overlap: float = 0.5,
    sigma_scale: float = 1.0 / 8,
    accumulate_dtype=np.float32,
    weight_scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Label map ``[D, H, W]`` and class probabilities ``[K, D, H, W]`` for a whole volume.

    Volumes smaller than the patch are padded by reflection and cropped back.
    """
    image = volume.image if isinstance(volume, VolumeSample) else np.asarray(volume)
    if image.ndim != 3:
        raise ContractError(f"expected a 3-D volume, got shape {image.shape}")
    patch_size = tuple(int(p) for p in patch_size)
    check_patch_shape(patch_size)
    extents = image.shape
    plan = plan_windows(extents, patch_size, overlap, sigma_scale)
    pads = [(0, p - n) for n, p in zip(extents, plan.padded_extents)]
    if any(after for _, after in pads):
        mode = "reflect" if min(extents) > 1 else "symmetric"
        image = np.pad(image, pads, mode=mode)
    k = net.config.num_classes
    weight = (plan.weight_map * weight_scale).astype(accumulate_dtype)
    num = np.zeros((k, *plan.padded_extents), dtype=accumulate_dtype)
    den = np.zeros(plan.padded_extents, dtype=accumulate_dtype)
    with no_grad():
        for origin in plan.origins:
            window = tuple(slice(a, a + p) for a, p in zip(origin, patch_size))
            x = Tensor(np.ascontiguousarray(image[window], dtype=np.float32)[None, None])
            probs = softmax_channels(net(x)[0]).data[0]
            num[(slice(None),) + window] += probs.astype(accumulate_dtype) * weight
            den[window] += weight
    probs = num / den
    crop = tuple(slice(0, n) for n in extents)
    probs = probs[(slice(None),) + crop]
    labels = np.argmax(probs, axis=0).astype(np.int64)
    return labels, probs.astype(np.float32)
