"""Patch-based, deep-supervised training with AdamW and a warmup/linear-decay schedule."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .checkpoint import Checkpoint
from .data import VolumeSample
from .errors import CheckpointError, ConfigError, ContractError, TrainingDivergedError
from .losses import deep_supervision_loss, deep_supervision_weights, dice_ce_loss  # noqa: F401
from .network import Network, NetworkConfig, build_network, check_patch_shape
from .optim import AdamWState, adamw_step
from .tensor import Tensor

log = logging.getLogger(__name__)

_PHASE_DEFAULTS = {
    "pretrain": dict(epochs=1500, batches_per_epoch=250, batch_size=8, lr_max=1e-3, warmup_epochs=0),
    "finetune": dict(epochs=300, batches_per_epoch=250, batch_size=2, lr_max=1e-3, warmup_epochs=50),
}


@dataclass(frozen=True)
class TrainConfig:
    phase: Literal["pretrain", "finetune"] = "pretrain"
    epochs: int = 1500
    batches_per_epoch: int = 250
    batch_size: int = 8
    patch_size: tuple[int, int, int] = (128, 128, 128)
    lr_max: float = 1e-3
    warmup_epochs: int = 0
    weight_decay: float = 0.01
    fg_oversample_prob: float = 0.33
    seed: int = 0
    augment: bool = True
    val_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        if self.phase not in _PHASE_DEFAULTS:
            raise ConfigError("phase", f"must be 'pretrain' or 'finetune', got {self.phase!r}")
        for name in ("batches_per_epoch", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be a positive integer")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be nonnegative")
        if len(self.patch_size) != 3 or any(p < 16 or p % 16 for p in self.patch_size):
            raise ConfigError("patch_size", f"extents must be multiples of 16, got {self.patch_size}")
        if self.lr_max <= 0:
            raise ConfigError("lr_max", "must be positive")
        if self.warmup_epochs < 0 or (self.epochs and self.warmup_epochs >= self.epochs):
            raise ConfigError("warmup_epochs", "must satisfy 0 <= warmup_epochs < epochs")
        if self.epochs == 0 and self.warmup_epochs:
            raise ConfigError("warmup_epochs", "must be 0 when epochs is 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be nonnegative")
        if not 0.0 <= self.fg_oversample_prob <= 1.0:
            raise ConfigError("fg_oversample_prob", "must lie in [0, 1]")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> TrainConfig:
        if phase not in _PHASE_DEFAULTS:
            raise ConfigError("phase", f"must be 'pretrain' or 'finetune', got {phase!r}")
        return cls(phase=phase, **{**_PHASE_DEFAULTS[phase], **overrides})

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def ds_weights(self, levels: int) -> np.ndarray:
        return deep_supervision_weights(levels)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.batches_per_epoch


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> lr_max over the warmup epochs, then linear decay to 0 at ``epochs``.

    ``epoch == epochs`` is accepted as the schedule's end point (value 0).
    """
    if not 0 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_max * epoch / cfg.warmup_epochs
    return cfg.lr_max * (cfg.epochs - epoch) / (cfg.epochs - cfg.warmup_epochs)


# -- sampling and augmentation -------------------------------------------------


def _pad_to(volume: np.ndarray, patch_size) -> np.ndarray:
    pads = [(0, max(0, p - n)) for n, p in zip(volume.shape, patch_size)]
    if not any(after for _, after in pads):
        return volume
    mode = "reflect" if all(n > 1 for n in volume.shape) else "symmetric"
    return np.pad(volume, pads, mode=mode)


def sample_patch_origin(labels: np.ndarray, patch_size, fg_prob: float, rng: np.random.Generator):
    """Patch origin for a (padded) label volume; foreground-centred with probability ``fg_prob``."""
    extents = labels.shape
    hi = [n - p for n, p in zip(extents, patch_size)]
    if rng.random() < fg_prob:
        fg = np.flatnonzero(labels)
        if fg.size:
            center = np.unravel_index(fg[int(rng.integers(fg.size))], extents)
            return tuple(int(min(max(c - p // 2, 0), h)) for c, p, h in zip(center, patch_size, hi))
    return tuple(int(rng.integers(0, h + 1)) for h in hi)


def sample_patch(
    sample: VolumeSample, patch_size, fg_prob: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Crop an (image, labels) patch; undersized volumes are padded by reflection first."""
    patch_size = tuple(int(p) for p in patch_size)
    image = _pad_to(sample.image, patch_size)
    labels = _pad_to(sample.labels, patch_size)
    o = sample_patch_origin(labels, patch_size, fg_prob, rng)
    window = tuple(slice(a, a + p) for a, p in zip(o, patch_size))
    return image[window].copy(), labels[window].copy()


@dataclass(frozen=True)
class AugmentConfig:
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_noise: float = 1.0
    noise_sigma_max: float = 0.1
    p_scale: float = 1.0
    scale_range: tuple[float, float] = (0.9, 1.1)


NO_AUGMENT = AugmentConfig(0.0, 0.0, 0.0, 0.1, 0.0)


def augment(image: np.ndarray, labels: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Mirror flips and 90-degree rotations on both volumes; noise and intensity scaling on the image."""
    for axis in range(3):
        if rng.random() < cfg.p_flip:
            image = np.flip(image, axis)
            labels = np.flip(labels, axis)
    if rng.random() < cfg.p_rotate:
        plane = [(0, 1), (0, 2), (1, 2)][int(rng.integers(3))]
        k = int(rng.integers(1, 4))
        if image.shape[plane[0]] != image.shape[plane[1]]:
            k = 2
        image = np.rot90(image, k, plane)
        labels = np.rot90(labels, k, plane)
    image = np.ascontiguousarray(image)
    labels = np.ascontiguousarray(labels)
    if rng.random() < cfg.p_noise:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        image = image + rng.normal(0.0, sigma, size=image.shape).astype(image.dtype)
    if rng.random() < cfg.p_scale:
        image = image * np.asarray(rng.uniform(*cfg.scale_range), dtype=image.dtype)
    return image, labels


# -- training loop -------------------------------------------------------------


@dataclass
class TrainLog:
    num_classes: int
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return ["epoch", "lr", "train_loss"] + [f"val_dsc_c{k}" for k in range(1, self.num_classes)] + ["seconds"]

    def append(self, epoch: int, lr: float, loss: float, val_dsc: Sequence[float] | None, seconds: float):
        if self.rows and epoch <= self.rows[-1]["epoch"]:
            raise ContractError("log rows must be strictly ordered by epoch")
        row = {"epoch": epoch, "lr": lr, "train_loss": loss, "seconds": seconds}
        vals = list(val_dsc) if val_dsc is not None else [math.nan] * (self.num_classes - 1)
        for k, v in enumerate(vals, start=1):
            row[f"val_dsc_c{k}"] = v
        self.rows.append(row)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_fmt(row[c]) for c in self.columns])
        return path

    @classmethod
    def read_csv(cls, path) -> TrainLog:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in reader]
            k = len([c for c in reader.fieldnames if c.startswith("val_dsc_c")]) + 1
        return cls(k, rows)


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _batch(dataset, cfg: TrainConfig, rng, aug_cfg):
    images, labels = [], []
    for _ in range(cfg.batch_size):
        sample = dataset[int(rng.integers(len(dataset)))]
        img, lab = sample_patch(sample, cfg.patch_size, cfg.fg_oversample_prob, rng)
        if aug_cfg is not None:
            img, lab = augment(img, lab, rng, aug_cfg)
        images.append(img)
        labels.append(lab)
    x = np.stack(images)[:, None].astype(np.float32)
    return x, np.stack(labels).astype(np.int64)


def train(
    dataset: Sequence[VolumeSample],
    net: Network,
    cfg: TrainConfig,
    val_dataset: Sequence[VolumeSample] | None = None,
    optimizer: AdamWState | None = None,
    aug_cfg: AugmentConfig | None = AugmentConfig(),
    callback=None,
) -> tuple[Checkpoint, TrainLog]:
    """Optimise ``net`` in place for ``epochs x batches_per_epoch`` steps.

    Each step draws its batch from an RNG seeded by ``(seed, epoch, batch)``,
    so runs are reproducible regardless of anything else consuming randomness.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    check_patch_shape(cfg.patch_size)
    k = net.config.num_classes
    for s in dataset:
        if s.labels.size and s.labels.max() >= k:
            raise ContractError(f"case {s.case_id!r} has label {s.labels.max()} but the network has {k} classes")
    if not cfg.augment:
        aug_cfg = None
    params = net.parameters()
    if optimizer is None:
        optimizer = AdamWState.for_params([p.data for p in params], weight_decay=cfg.weight_decay)
    weights = cfg.ds_weights(net.config.deep_supervision_levels)
    log_ = TrainLog(k)
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        losses = []
        for b in range(cfg.batches_per_epoch):
            rng = np.random.default_rng([cfg.seed, epoch, b])
            x, y = _batch(dataset, cfg, rng, aug_cfg)
            outputs = net(Tensor(x))
            loss = deep_supervision_loss(outputs, y, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            net.zero_grad()
            loss.backward()
            adamw_step([p.data for p in params], [p.grad for p in params], optimizer, lr)
            losses.append(value)
            step += 1
        val = None
        if val_dataset and cfg.val_every and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
            val = validation_dsc(net, val_dataset, cfg.patch_size)
        log_.append(epoch, lr, float(np.mean(losses)), val, time.perf_counter() - t0)
        log.info("epoch %d lr %.3g loss %.4f", epoch, lr, log_.rows[-1]["train_loss"])
        if callback is not None:
            callback(epoch, net, log_)
    ckpt = Checkpoint.from_network(net, optimizer, seed=cfg.seed, phase=cfg.phase)
    return ckpt, log_


def validation_dsc(net: Network, samples: Sequence[VolumeSample], patch_size) -> list[float]:
    """Mean per-class DSC (classes 1..K-1) of sliding-window predictions."""
    from .inference import sliding_window_predict
    from .metrics import dsc

    k = net.config.num_classes
    scores = np.zeros((len(samples), k - 1))
    for i, s in enumerate(samples):
        pred, _ = sliding_window_predict(net, s, patch_size)
        for c in range(1, k):
            scores[i, c - 1] = dsc(pred == c, s.labels == c)
    return scores.mean(axis=0).tolist()


def load_backbone(ckpt: Checkpoint, config: NetworkConfig, seed: int = 0) -> Network:
    """Network for ``config`` with every non-head parameter taken from ``ckpt``.

    Heads are copied too when their shapes agree (same class count); otherwise
    they keep their fresh initialisation.
    """
    mismatch = [
        f for f, v in ckpt.config.to_dict().items()
        if f not in ("num_classes", "deep_supervision_levels") and config.to_dict()[f] != v
    ]
    if mismatch:
        raise CheckpointError(f"backbone incompatible: config differs in {mismatch}")
    net = build_network(config, seed=seed)
    for name, p in net.named_parameters():
        is_head = name.startswith("head")
        if name not in ckpt.params:
            if is_head:
                continue
            raise CheckpointError(f"{name}: missing from checkpoint")
        src = ckpt.params[name]
        if src.shape != p.shape:
            if is_head:
                continue
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != network shape {p.shape}")
        p.data[...] = src
    return net


def finetune(
    ckpt: Checkpoint,
    dataset: Sequence[VolumeSample],
    cfg: TrainConfig,
    config: NetworkConfig | None = None,
    val_dataset: Sequence[VolumeSample] | None = None,
    aug_cfg: AugmentConfig | None = AugmentConfig(),
) -> tuple[Checkpoint, TrainLog, Network]:
    """Continue training from ``ckpt``; ``config`` may change the class count (heads re-initialise).

    The optimizer state starts fresh; ``cfg.epochs == 0`` performs a pure transfer.
    """
    if cfg.phase != "finetune":
        raise ConfigError("phase", "finetune() requires a finetune-phase TrainConfig")
    config = config or ckpt.config
    net = load_backbone(ckpt, config, seed=cfg.seed)
    out, log_ = train(dataset, net, cfg, val_dataset, aug_cfg=aug_cfg)
    return out, log_, net
