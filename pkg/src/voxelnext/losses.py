"""Dice + cross-entropy compound loss and its deep-supervised sum."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError
from .ops import downsample_labels, log_softmax_channels
from .tensor import Tensor

DICE_SMOOTH = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[B, D, H, W]`` integer labels -> ``[B, K, D, H, W]`` indicator volume."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(
            f"labels must lie in [0, {num_classes}), found range [{labels.min()}, {labels.max()}]"
        )
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    for k in range(num_classes):
        out[:, k] = labels == k
    return out


def dice_ce_loss(logits: Tensor, labels: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """``0.5 * (1 - mean batch Dice) + 0.5 * voxel-mean cross-entropy``.

    Dice is computed per class over the whole batch on softmax probabilities,
    background included, with ``smooth`` added to numerator and denominator.
    """
    if logits.ndim != 5:
        raise ContractError(f"logits must be [B, K, D, H, W], got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ContractError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    k = logits.shape[1]
    target = one_hot(labels, k, logits.dtype)
    n_vox = labels.size

    logp = log_softmax_channels(logits)
    ce = (logp * target).sum() * (-1.0 / n_vox)
    probs = logp.exp()
    axes = (0, 2, 3, 4)
    intersection = (probs * target).sum(axis=axes)
    denominator = probs.sum(axis=axes) + target.sum(axis=axes)
    dice = (intersection * 2.0 + smooth) / (denominator + smooth)
    dice_loss = 1.0 - dice.mean()
    return dice_loss * 0.5 + ce * 0.5


def deep_supervision_weights(levels: int) -> np.ndarray:
    """Weights proportional to ``2**-k``, normalised to sum to one."""
    w = 0.5 ** np.arange(levels, dtype=np.float64)
    return w / w.sum()


def deep_supervision_loss(
    outputs: Sequence[Tensor], labels: np.ndarray, weights: Sequence[float] | None = None
) -> Tensor:
    """Weighted sum of :func:`dice_ce_loss` over resolution levels, full resolution first."""
    labels = np.asarray(labels)
    if weights is None:
        weights = deep_supervision_weights(len(outputs))
    if len(weights) != len(outputs):
        raise ContractError("one weight per output level is required")
    total = None
    for k, (out, w) in enumerate(zip(outputs, weights)):
        factor = 2**k
        expected = tuple(n // factor for n in labels.shape[1:])
        if out.shape[2:] != expected or any(n % factor for n in labels.shape[1:]):
            raise ContractError(
                f"level {k} output extents {out.shape[2:]} do not match labels {labels.shape[1:]} / {factor}"
            )
        term = dice_ce_loss(out, downsample_labels(labels, factor)) * float(w)
        total = term if total is None else total + term
    return total
