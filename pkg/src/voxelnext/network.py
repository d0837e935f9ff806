"""MedNeXt-v2 macro-architecture built on the volumetric ops.

Five resolution stages with widths ``C, 2C, 4C, 8C, 16C``; encoder stages end
in a down block, decoder stages start with an up block plus an additive skip
from the matching encoder stage, and a 1x1x1 head produces logits at every
supervised decoder level.
"""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, Literal, Mapping

import numpy as np

from . import presets
from .errors import ConfigError, ContractError
from .ops import ConvSpec, GrnParams, NormParams, conv3d, gelu, grn3d, instance_norm
from .tensor import Tensor, get_default_dtype, parameter

NUM_STAGES = 5


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    stage_blocks: tuple[int, ...] = presets.V1_L_BLOCKS
    expansion_ratios: tuple[int, ...] = presets.V1_L_RATIOS
    kernel: int = 3
    num_classes: int = 2
    in_channels: int = 1
    deep_supervision_levels: int = 4
    grn: bool = True
    grn_divisor: Literal["sum", "mean"] = "sum"
    grn_eps: float = 1e-6
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "expansion_ratios", tuple(int(r) for r in self.expansion_ratios))
        self.validate()

    def validate(self) -> None:
        for name in ("base_channels", "num_classes", "in_channels"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        if len(self.stage_blocks) != 9:
            raise ConfigError("stage_blocks", f"needs 9 entries, got {len(self.stage_blocks)}")
        if len(self.expansion_ratios) != 9:
            raise ConfigError("expansion_ratios", f"needs 9 entries, got {len(self.expansion_ratios)}")
        if any(b < 1 for b in self.stage_blocks):
            raise ConfigError("stage_blocks", "block counts must be positive")
        if any(r < 1 for r in self.expansion_ratios):
            raise ConfigError("expansion_ratios", "expansion ratios must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel", "must be a positive odd integer")
        if not 1 <= self.deep_supervision_levels <= NUM_STAGES:
            raise ConfigError("deep_supervision_levels", "must lie in [1, 5]")
        if self.grn_divisor not in ("sum", "mean"):
            raise ConfigError("grn_divisor", "must be 'sum' or 'mean'")
        if self.grn_eps <= 0 or self.norm_eps <= 0:
            raise ConfigError("grn_eps", "eps values must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(NUM_STAGES))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        d["expansion_ratios"] = list(self.expansion_ratios)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> NetworkConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown network config field")
        return cls(**d)

    def replace(self, **changes) -> NetworkConfig:
        return dataclasses.replace(self, **changes)


def tiny_config(**overrides) -> NetworkConfig:
    """Desk-scale configuration: C=8, one block and ratio 2 everywhere, 3 supervised levels."""
    base = dict(
        base_channels=8,
        stage_blocks=presets.TINY_BLOCKS,
        expansion_ratios=presets.TINY_RATIOS,
        deep_supervision_levels=3,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def scale_config(base: NetworkConfig, variant: Literal["base", "width_x2"]) -> NetworkConfig:
    """Compound-scaling transform; ``width_x2`` doubles the base channel count only."""
    if variant == "base":
        return base
    if variant == "width_x2":
        return base.replace(base_channels=2 * base.base_channels)
    raise ConfigError("variant", f"unknown scaling variant {variant!r}")


class Conv:
    """Parameters plus geometry of one convolution layer."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None, bias: bool = True):
        self.spec = spec
        shape = spec.weight_shape
        fan_in = shape[1] * int(np.prod(spec.kernel))
        bound = 1.0 / np.sqrt(fan_in)
        dtype = get_default_dtype()
        if rng is None:
            w = np.zeros(shape, dtype)
            b = np.zeros(spec.out_channels, dtype)
        else:
            w = rng.uniform(-bound, bound, size=shape).astype(dtype)
            b = rng.uniform(-bound, bound, size=spec.out_channels).astype(dtype)
        self.weight = parameter(w)
        self.bias = parameter(b) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.spec)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias


BlockMode = Literal["plain", "down", "up"]


class MedNeXtBlock:
    """Residual ConvNeXt block; ``down``/``up`` variants change resolution and width.

    Main path: depthwise conv -> instance norm -> pointwise expansion -> GELU
    -> GRN -> pointwise compression. ``down`` uses a stride-2 depthwise conv
    and a stride-2 kernel-1 residual projection; ``up`` uses their transposed
    counterparts.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        ratio: int,
        cfg: NetworkConfig,
        rng: np.random.Generator,
        mode: BlockMode = "plain",
    ):
        if mode == "plain" and in_channels != out_channels:
            raise ContractError("plain blocks keep the channel count")
        self.mode = mode
        k = cfg.kernel
        pad = k // 2
        hidden = ratio * in_channels
        dtype = get_default_dtype()
        if mode == "plain":
            dw = ConvSpec(in_channels, in_channels, k, 1, pad, groups=in_channels)
        elif mode == "down":
            dw = ConvSpec(in_channels, in_channels, k, 2, pad, groups=in_channels)
        else:
            dw = ConvSpec(
                in_channels, in_channels, k, 2, pad, groups=in_channels,
                transposed=True, output_padding=1,
            )
        self.dw = Conv(dw, rng)
        self.norm = NormParams(
            parameter(np.ones(in_channels, dtype)), parameter(np.zeros(in_channels, dtype)), cfg.norm_eps
        )
        self.expand = Conv(ConvSpec(in_channels, hidden, 1), rng)
        self.grn = None
        if cfg.grn:
            self.grn = GrnParams(
                parameter(np.zeros(hidden, dtype)),
                parameter(np.zeros(hidden, dtype)),
                cfg.grn_eps,
                cfg.grn_divisor,
            )
        self.compress = Conv(ConvSpec(hidden, out_channels, 1), rng)
        self.res = None
        if mode == "down":
            self.res = Conv(ConvSpec(in_channels, out_channels, 1, 2), rng)
        elif mode == "up":
            self.res = Conv(
                ConvSpec(in_channels, out_channels, 1, 2, transposed=True, output_padding=1), rng
            )

    def __call__(self, x: Tensor, bypass_grn: bool = False, capture=None, name: str = "") -> Tensor:
        h = self.dw(x)
        h = instance_norm(h, self.norm)
        h = gelu(self.expand(h))
        if capture is not None:
            capture[f"{name}.act"] = h.data
        if self.grn is not None and not bypass_grn:
            h = grn3d(h, self.grn)
        if capture is not None:
            capture[f"{name}.grn"] = h.data
        h = self.compress(h)
        out = h + (x if self.res is None else self.res(x))
        if capture is not None:
            capture[name] = out.data
        return out

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.dw.named_parameters():
            yield f"dw.{n}", p
        yield "norm.gamma", self.norm.gamma
        yield "norm.beta", self.norm.beta
        for n, p in self.expand.named_parameters():
            yield f"expand.{n}", p
        if self.grn is not None:
            yield "grn.gamma", self.grn.gamma
            yield "grn.beta", self.grn.beta
        for n, p in self.compress.named_parameters():
            yield f"compress.{n}", p
        if self.res is not None:
            for n, p in self.res.named_parameters():
                yield f"res.{n}", p


@dataclass
class Network:
    config: NetworkConfig | None
    modules: "OrderedDict[str, object]" = field(default_factory=OrderedDict)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, module in self.modules.items():
            for n, p in module.named_parameters():
                yield f"{prefix}.{n}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy arrays into parameters; returns names that were skipped (non-strict only)."""
        skipped = []
        own = dict(self.named_parameters())
        if strict:
            missing = [n for n in own if n not in state]
            if missing:
                raise ContractError(f"state is missing parameter {missing[0]}")
        for name, p in own.items():
            if name not in state:
                skipped.append(name)
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                if strict:
                    raise ContractError(f"{name}: shape {arr.shape} != {p.shape}")
                skipped.append(name)
                continue
            p.data[...] = arr
        return skipped

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, patch, bypass_grn: bool = False, capture=None) -> list[Tensor]:
        return forward(self, patch, bypass_grn=bypass_grn, capture=capture)


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    """Instantiate every layer of the architecture with seeded uniform fan-in init.

    GRN scale and shift start at zero so every GRN is an identity map.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    widths = config.widths
    B, R = config.stage_blocks, config.expansion_ratios
    m: OrderedDict[str, object] = OrderedDict()
    m["stem"] = Conv(ConvSpec(config.in_channels, widths[0], 1), rng)
    for i in range(4):
        for j in range(B[i]):
            m[f"enc{i}.block{j}"] = MedNeXtBlock(widths[i], widths[i], R[i], config, rng)
        m[f"down{i}"] = MedNeXtBlock(widths[i], widths[i + 1], R[i + 1], config, rng, "down")
    for j in range(B[4]):
        m[f"bottleneck.block{j}"] = MedNeXtBlock(widths[4], widths[4], R[4], config, rng)
    for pos, i in enumerate((3, 2, 1, 0)):
        slot = 5 + pos
        m[f"up{i}"] = MedNeXtBlock(widths[i + 1], widths[i], R[slot], config, rng, "up")
        for j in range(B[slot]):
            m[f"dec{i}.block{j}"] = MedNeXtBlock(widths[i], widths[i], R[slot], config, rng)
    for k in range(config.deep_supervision_levels):
        m[f"head{k}"] = Conv(ConvSpec(widths[k], config.num_classes, 1), rng)
    return Network(config, m)


def layer_names(net: Network) -> list[str]:
    """Block-level capture points accepted by ``forward(..., capture=...)``."""
    names = ["stem"]
    for name, module in net.modules.items():
        if isinstance(module, MedNeXtBlock):
            names += [name, f"{name}.act", f"{name}.grn"]
    return names


def check_patch_shape(shape) -> None:
    for axis, n in zip("DHW", shape[-3:]):
        if n % 16:
            raise ContractError(f"spatial axis {axis} has extent {n}, which is not divisible by 16")


def forward(net: Network, patch, bypass_grn: bool = False, capture: dict | None = None) -> list[Tensor]:
    """Logits for every supervised level, full resolution first.

    ``bypass_grn`` skips all GRN modules; ``capture`` (a dict) receives the
    intermediate feature maps keyed by :func:`layer_names`.
    """
    x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch, dtype=get_default_dtype()))
    if x.ndim != 5:
        raise ContractError(f"patch must be [B, C, D, H, W], got {x.shape}")
    check_patch_shape(x.shape)
    cfg = net.config
    mods = net.modules
    B = cfg.stage_blocks

    def run(name, h):
        return mods[name](h, bypass_grn=bypass_grn, capture=capture, name=name)

    h = mods["stem"](x)
    if capture is not None:
        capture["stem"] = h.data
    skips = []
    for i in range(4):
        for j in range(B[i]):
            h = run(f"enc{i}.block{j}", h)
        skips.append(h)
        h = run(f"down{i}", h)
    for j in range(B[4]):
        h = run(f"bottleneck.block{j}", h)
    levels = cfg.deep_supervision_levels
    outputs: dict[int, Tensor] = {}
    if levels == NUM_STAGES:
        outputs[4] = mods["head4"](h)
    for pos, i in enumerate((3, 2, 1, 0)):
        h = run(f"up{i}", h) + skips[i]
        for j in range(B[5 + pos]):
            h = run(f"dec{i}.block{j}", h)
        if i < levels:
            outputs[i] = mods[f"head{i}"](h)
    return [outputs[k] for k in range(levels)]


def count_parameters(net) -> int:
    """Total number of parameter elements of a network or name->array mapping."""
    if isinstance(net, Network):
        return int(sum(p.size for p in net.parameters()))
    return int(sum(np.asarray(v).size for v in net.values()))
