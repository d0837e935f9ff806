"""Checkpoint files: a JSON manifest plus a little-endian float32 blob.

The manifest lists every parameter's name, shape, byte offset and byte
length inside the blob. Nothing in a checkpoint depends on the training patch
size, so a network restored from it runs at any valid patch size.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CheckpointError
from .network import Network, NetworkConfig, build_network
from .optim import AdamWState

FORMAT_VERSION = "voxelnext-ckpt-1"
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: "OrderedDict[str, np.ndarray]"
    optimizer: AdamWState | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, optimizer: AdamWState | None = None, **metadata) -> Checkpoint:
        opt = None
        if optimizer is not None:
            opt = AdamWState(
                [m.copy() for m in optimizer.first_moment],
                [v.copy() for v in optimizer.second_moment],
                optimizer.step_count,
                optimizer.betas,
                optimizer.eps,
                optimizer.weight_decay,
            )
        return cls(net.config, net.state_dict(), opt, dict(metadata))

    def to_network(self, config: NetworkConfig | None = None) -> Network:
        config = config or self.config
        if config != self.config:
            diff = _config_diff(self.config, config)
            raise CheckpointError(f"checkpoint config differs from the requested config in {diff}")
        net = build_network(config)
        _restore(net, self.params)
        return net

    def save(self, path) -> Path:
        return _write(self, Path(path))


def save_checkpoint(net: Network, path, optimizer: AdamWState | None = None, **metadata) -> Path:
    """Write ``path`` (manifest) and a sibling ``.bin`` blob; returns the manifest path."""
    return Checkpoint.from_network(net, optimizer, **metadata).save(path)


def load_checkpoint(path, config: NetworkConfig | None = None) -> Network:
    """Rebuild a network from a checkpoint, optionally checking it against ``config``."""
    return read_checkpoint(path).to_network(config)


def _config_diff(a: NetworkConfig, b: NetworkConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return [k for k in da if da[k] != db[k]]


def _restore(net: Network, params) -> None:
    own = OrderedDict(net.named_parameters())
    for name, p in own.items():
        if name not in params:
            raise CheckpointError(f"{name}: missing from checkpoint")
        if params[name].shape != p.shape:
            raise CheckpointError(f"{name}: checkpoint shape {params[name].shape} != network shape {p.shape}")
    extra = [n for n in params if n not in own]
    if extra:
        raise CheckpointError(f"{extra[0]}: not a parameter of this network")
    for name, p in own.items():
        p.data[...] = params[name]


def _blob_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".bin")


def _write(ckpt: Checkpoint, path: Path) -> Path:
    entries = []
    chunks = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    for name, arr in ckpt.params.items():
        add(name, arr)
    optimizer = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        names = list(ckpt.params)
        for name, m in zip(names, opt.first_moment):
            add(f"optimizer.first_moment.{name}", m)
        for name, v in zip(names, opt.second_moment):
            add(f"optimizer.second_moment.{name}", v)
        optimizer = {
            "step_count": opt.step_count,
            "betas": list(opt.betas),
            "eps": opt.eps,
            "weight_decay": opt.weight_decay,
        }
    blob = _blob_path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "created": {"package": "voxelnext", "version": __version__, **ckpt.metadata},
        "config": ckpt.config.to_dict(),
        "blob": blob.name,
        "byte_order": "little",
        "dtype": "float32",
        "blob_nbytes": offset,
        "parameters": entries,
        "optimizer": optimizer,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_checkpoint(path) -> Checkpoint:
    """Parse and validate a checkpoint without building a network."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r} (expected {FORMAT_VERSION})")
    try:
        config = NetworkConfig.from_dict(manifest["config"])
    except Exception as exc:
        raise CheckpointError(f"invalid config in manifest: {exc}") from exc
    blob_path = path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {blob_path}: {exc}") from exc

    expected = {n: p.shape for n, p in build_network_shapes(config).items()}
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in manifest["parameters"]:
        name, shape = entry["name"], tuple(entry["shape"])
        start, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: manifest shape {list(shape)} does not match nbytes={nbytes}")
        if start + nbytes > len(blob):
            raise CheckpointError(
                f"{name}: blob truncated, needs bytes [{start}, {start + nbytes}) but has {len(blob)}"
            )
        if not name.startswith("optimizer.") and name in expected and expected[name] != shape:
            raise CheckpointError(
                f"{name}: manifest shape {list(shape)} != network shape {list(expected[name])}"
            )
        arrays[name] = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=start).reshape(shape).astype(np.float32)
    params = OrderedDict((n, a) for n, a in arrays.items() if not n.startswith("optimizer."))
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointError(f"{missing[0]}: missing from checkpoint")

    optimizer = None
    if manifest.get("optimizer"):
        o = manifest["optimizer"]
        optimizer = AdamWState(
            [arrays[f"optimizer.first_moment.{n}"] for n in params],
            [arrays[f"optimizer.second_moment.{n}"] for n in params],
            int(o["step_count"]),
            tuple(o["betas"]),
            float(o["eps"]),
            float(o["weight_decay"]),
        )
    metadata = {k: v for k, v in manifest.get("created", {}).items() if k not in ("package", "version")}
    return Checkpoint(config, params, optimizer, metadata)


def build_network_shapes(config: NetworkConfig) -> "OrderedDict[str, np.ndarray]":
    """Parameter name -> array of the right shape for ``config`` (only the shapes matter)."""
    net = build_network(config)
    return OrderedDict((n, p.data) for n, p in net.named_parameters())
