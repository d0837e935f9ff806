"""Command-line entry point: ``voxelnext <subcommand> [flags]``.

Settings come from three layers, later ones winning: built-in defaults, an
optional ``--config`` file and command-line flags. The config file is flat
``key = value`` text with section prefixes (``train.lr_max = 1e-3``); ``#``
starts a comment. Every run writes the fully resolved settings to
``<out>/config.resolved`` in the same format, and passing that file back via
``--config`` repeats the run.

Randomness derives from the single ``run.seed`` through
``derive_seed(seed, key)`` with the keys ``data``, ``folds``, ``init``,
``init:<fold>``, ``train`` and ``train:<fold>``.

Failures print one JSON object on one line to stderr and exit with 2 for
configuration errors, 3 for contract or invariant violations and 1 for any
other runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import warnings
from contextlib import ExitStack
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .checkpoint import read_checkpoint
from .data import (
    TASKS,
    VolumeSample,
    derive_seed,
    generate_dataset,
    load_dataset,
    preprocess,
    read_manifest,
    read_volume,
    write_manifest,
    write_volume,
)
from .diagnostics import activation_stats, export_activation_grid, write_stats_csv
from .errors import ConfigError, ContractError, StructuralError, VoxelNextError
from .inference import sliding_window_predict
from .metrics import (
    aggregate,
    assign_folds,
    cross_validate,
    evaluate,
    read_aggregate_csv,
    write_aggregate_csv,
    write_records_csv,
)
from .network import NetworkConfig, build_network, layer_names, scale_config, tiny_config
from .training import TrainConfig, finetune, train

log = logging.getLogger("voxelnext")

COMMANDS = ("gen-data", "pretrain", "finetune", "infer", "eval", "cv", "probe", "report")
SNAPSHOT = "config.resolved"
CHECKPOINT = "checkpoint.json"


class OutputExistsError(VoxelNextError, FileExistsError):
    pass


# -- settings schema -----------------------------------------------------------


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "on", "yes"):
        return True
    if t in ("0", "false", "off", "no"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _patch(text: str) -> str:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ValueError(f"expected N or D,H,W, got {text!r}")
    sizes = [int(p) for p in parts]
    if any(n < 16 or n % 16 for n in sizes):
        raise ValueError(f"patch extents must be positive multiples of 16, got {text!r}")
    return ",".join(str(n) for n in sizes)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text

    return parse


def _path(text: str) -> str:
    return str(Path(text).expanduser().resolve()) if text else ""


def _paths(text: str) -> str:
    return ";".join(_labelled_path(p) for p in text.split(";") if p)


def _labelled_path(text: str) -> str:
    label, sep, path = text.rpartition("=")
    return f"{label}={_path(path)}" if sep else _path(text)


# key -> (parser, default). An empty default means "derived at run time".
SCHEMA: dict[str, tuple[Callable[[str], Any], str]] = {
    "run.command": (_choice(*COMMANDS), ""),
    "run.seed": (int, "0"),
    "run.threads": (int, "0"),
    "io.data": (_path, ""),
    "io.ckpt": (_path, ""),
    "io.pred": (_path, ""),
    "io.inputs": (_paths, ""),
    "data.task": (_choice(*TASKS), "organ"),
    "data.n_cases": (int, "20"),
    "data.extent": (int, "0"),
    "data.n_train": (int, "-1"),
    "data.folds": (int, "5"),
    "data.spacing_mm": (float, "0"),
    "data.split": (str, ""),
    "net.preset": (_choice("tiny", "v1-L"), "tiny"),
    "net.base_channels": (int, "0"),
    "net.num_classes": (int, "0"),
    "net.variant": (_choice("base", "width_x2"), "base"),
    "net.grn": (_bool, "on"),
    "net.grn_divisor": (_choice("sum", "mean"), "sum"),
    "net.deep_supervision_levels": (int, "0"),
    "train.epochs": (int, ""),
    "train.batches_per_epoch": (int, ""),
    "train.batch_size": (int, ""),
    "train.patch": (_patch, "32"),
    "train.lr_max": (float, ""),
    "train.warmup_epochs": (int, ""),
    "train.weight_decay": (float, "0.01"),
    "train.fg_oversample_prob": (float, "0.33"),
    "train.augment": (_bool, "on"),
    "train.val_every": (int, "0"),
    "infer.overlap": (float, "0.5"),
    "infer.sigma_scale": (float, "0.125"),
    "eval.tolerance_mm": (float, "1.0"),
    "eval.num_classes": (int, "0"),
    "cv.folds": (int, "5"),
    "probe.layers": (str, "enc0.block0.act"),
    "probe.cases": (int, "1"),
    "probe.bypass_grn": (_bool, "off"),
}

# flag -> settings key
FLAG_KEYS = {
    "seed": "run.seed",
    "threads": "run.threads",
    "patch": "train.patch",
    "epochs": "train.epochs",
    "variant": "net.variant",
    "grn": "net.grn",
    "grn_divisor": "net.grn_divisor",
    "data": "io.data",
    "ckpt": "io.ckpt",
    "pred": "io.pred",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}", f"expected key = value, got {raw.strip()!r}")
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown setting ({source}:{lineno})")
        out[key] = value.strip()
    return out


def _coerce(key: str, text: str) -> Any:
    parser = SCHEMA[key][0]
    try:
        return parser(text)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def _render(key: str, value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class Settings:
    values: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def set(self, key: str, value: Any) -> None:
        self.values[key] = value

    def text(self) -> str:
        lines = [f"# voxelnext {__version__} resolved settings"]
        section = None
        for key in SCHEMA:
            head = key.split(".", 1)[0]
            if head != section:
                lines.append("")
                section = head
            value = self.values.get(key)
            lines.append(f"{key} = {'' if value is None else _render(key, value)}")
        return "\n".join(lines) + "\n"


def resolve_settings(command: str, config_path: str | None, overrides: dict[str, str]) -> Settings:
    raw = {k: d for k, (_, d) in SCHEMA.items()}
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {config_path}: {exc.strerror or exc}") from None
        raw.update(parse_config_text(text, config_path))
    for key, value in overrides.items():
        if key not in SCHEMA:
            raise ConfigError(key, "unknown setting")
        raw[key] = value
    raw["run.command"] = command
    values = {k: (_coerce(k, v) if v != "" else None) for k, v in raw.items()}
    if os.environ.get("VOXELNEXT_DETERMINISTIC", "") == "1":
        values["run.threads"] = 1
    if values["run.threads"] < 0:
        raise ConfigError("run.threads", "must be nonnegative")
    return Settings(values)


# -- argument parsing -----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit itself
        raise ConfigError("argv", message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="voxelnext", description="MedNeXt-v2 style volumetric segmentation on the CPU.")
    parser.add_argument("--version", action="version", version=f"voxelnext {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "gen-data": "generate a synthetic phantom dataset",
        "pretrain": "train a network from scratch",
        "finetune": "continue training from a checkpoint",
        "infer": "sliding-window prediction for a dataset",
        "eval": "DSC / NSD of predictions against ground truth",
        "cv": "k-fold cross-validation",
        "probe": "activation statistics and grids for chosen layers",
        "report": "merge aggregate metric tables into one comparison",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--seed", help="master seed (run.seed)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
        p.add_argument("--threads", help="thread count; 1 is fully deterministic")
        p.add_argument("--patch", help="patch size N or D,H,W")
        p.add_argument("--epochs", help="training epochs")
        p.add_argument("--variant", choices=("base", "width_x2"))
        p.add_argument("--grn", choices=("on", "off"))
        p.add_argument("--grn-divisor", dest="grn_divisor", choices=("sum", "mean"))
        p.add_argument("--data", help="dataset manifest (or a directory holding manifest.csv)")
        p.add_argument("--ckpt", help="checkpoint manifest (or a directory holding checkpoint.json)")
        p.add_argument("--pred", help="prediction manifest (or a directory holding predictions.csv)")
        p.add_argument("--inputs", nargs="+", help="report inputs: [label=]path to aggregate.csv or its directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any setting")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--set", f"expected KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr)
        if value is not None:
            out[key] = value
    if args.inputs:
        out["io.inputs"] = ";".join(args.inputs)
    return out


# -- helpers ---------------------------------------------------------------------


def _prepare_out(out: Path, force: bool) -> Path:
    out = out.expanduser().resolve()
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise OutputExistsError(f"output directory {out} is not empty; pass --force to replace it")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _locate(path: str, default_name: str, key: str) -> Path:
    if not path:
        raise ConfigError(key, "required for this command")
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.exists():
        raise ConfigError(key, f"{p} does not exist")
    return p


def _limit_threads(stack: ExitStack, threads: int) -> None:
    if threads <= 0:
        return
    from threadpoolctl import threadpool_limits
    import numba

    stack.enter_context(threadpool_limits(limits=threads))
    with warnings.catch_warnings():
        # numba reports unusable optional threading layers while initialising
        warnings.simplefilter("ignore", numba.NumbaWarning)
        previous = numba.get_num_threads()
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    stack.callback(numba.set_num_threads, previous)


def _load(s: Settings, split: str | None = None) -> list[VolumeSample]:
    manifest = _locate(s["io.data"], "manifest.csv", "io.data")
    samples = load_dataset(manifest, split=split or None)
    if not samples:
        raise ContractError(f"no cases in {manifest} for split {split!r}")
    target = s["data.spacing_mm"] or None
    return [preprocess(x, target) for x in samples]


def _num_classes(samples: Sequence[VolumeSample]) -> int:
    return int(max(int(x.labels.max()) for x in samples)) + 1


def _net_config(s: Settings, num_classes: int) -> NetworkConfig:
    if s["net.preset"] == "tiny":
        cfg = tiny_config()
    else:
        cfg = NetworkConfig()
    changes: dict[str, Any] = {
        "num_classes": s["net.num_classes"] or num_classes,
        "grn": s["net.grn"],
        "grn_divisor": s["net.grn_divisor"],
    }
    if s["net.base_channels"]:
        changes["base_channels"] = s["net.base_channels"]
    if s["net.deep_supervision_levels"]:
        changes["deep_supervision_levels"] = s["net.deep_supervision_levels"]
    return scale_config(cfg.replace(**changes), s["net.variant"])


def _train_config(s: Settings, phase: str, seed: int) -> TrainConfig:
    base = TrainConfig.for_phase(phase)
    fields = {}
    for name in ("epochs", "batches_per_epoch", "batch_size", "lr_max", "warmup_epochs"):
        value = s[f"train.{name}"]
        if value is None:
            value = getattr(base, name)
            s.set(f"train.{name}", value)
        fields[name] = value
    patch = tuple(int(p) for p in s["train.patch"].split(","))
    try:
        return base.replace(
            **fields,
            patch_size=patch,
            weight_decay=s["train.weight_decay"],
            fg_oversample_prob=s["train.fg_oversample_prob"],
            augment=s["train.augment"],
            val_every=s["train.val_every"],
            seed=seed,
        )
    except ConfigError as exc:
        field = "train.patch" if exc.field == "patch_size" else f"train.{exc.field}"
        raise ConfigError(field, exc.message) from None


def _patch_size(s: Settings) -> tuple[int, int, int]:
    return tuple(int(p) for p in s["train.patch"].split(","))


def _predict(net, sample: VolumeSample, s: Settings) -> np.ndarray:
    labels, _ = sliding_window_predict(net, sample, _patch_size(s), s["infer.overlap"], s["infer.sigma_scale"])
    return labels


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(s: Settings, out: Path) -> list[str]:
    seed = derive_seed(s["run.seed"], "data")
    extent = s["data.extent"] or None
    samples = generate_dataset(s["data.task"], s["data.n_cases"], seed, extent)
    n_train = s["data.n_train"]
    if n_train < 0:
        n_train = int(round(0.8 * len(samples)))
    if not 0 <= n_train <= len(samples):
        raise ConfigError("data.n_train", f"must lie in [0, {len(samples)}]")
    ids = [x.case_id for x in samples[:n_train]]
    folds = min(s["data.folds"], len(ids)) if ids else 0
    fold_of = assign_folds(ids, folds, derive_seed(s["run.seed"], "folds")) if folds else {}
    rows = []
    for i, sample in enumerate(samples):
        rel = f"volumes/{sample.case_id}.json"
        write_volume(sample, out / rel)
        split = "train" if i < n_train else "test"
        rows.append({"case_id": sample.case_id, "path": rel, "split": split, "fold": fold_of.get(sample.case_id, "")})
    write_manifest(rows, out / "manifest.csv")
    return ["manifest.csv", "volumes/"]


def cmd_pretrain(s: Settings, out: Path) -> list[str]:
    samples = _load(s, s["data.split"] or "train")
    cfg = _train_config(s, "pretrain", derive_seed(s["run.seed"], "train"))
    net = build_network(_net_config(s, _num_classes(samples)), seed=derive_seed(s["run.seed"], "init"))
    val = _load(s, "test") if cfg.val_every else None
    ckpt, train_log = train(samples, net, cfg, val_dataset=val)
    ckpt.save(out / CHECKPOINT)
    train_log.write_csv(out / "train_log.csv")
    return [CHECKPOINT, "train_log.csv"]


def cmd_finetune(s: Settings, out: Path) -> list[str]:
    source = read_checkpoint(_locate(s["io.ckpt"], CHECKPOINT, "io.ckpt"))
    samples = _load(s, s["data.split"] or "train")
    cfg = _train_config(s, "finetune", derive_seed(s["run.seed"], "train"))
    k = s["net.num_classes"] or _num_classes(samples)
    config = source.config.replace(num_classes=k)
    val = _load(s, "test") if cfg.val_every else None
    ckpt, train_log, _ = finetune(source, samples, cfg, config=config, val_dataset=val)
    ckpt.save(out / CHECKPOINT)
    train_log.write_csv(out / "train_log.csv")
    return [CHECKPOINT, "train_log.csv"]


def cmd_infer(s: Settings, out: Path) -> list[str]:
    net = read_checkpoint(_locate(s["io.ckpt"], CHECKPOINT, "io.ckpt")).to_network()
    samples = _load(s, s["data.split"] or "test")
    rows = []
    for sample in samples:
        labels = _predict(net, sample, s)
        rel = f"predictions/{sample.case_id}.json"
        write_volume(VolumeSample(sample.image, labels, sample.spacing_mm, sample.case_id), out / rel)
        rows.append({"case_id": sample.case_id, "path": rel, "split": "pred", "fold": ""})
    write_manifest(rows, out / "predictions.csv")
    return ["predictions.csv", "predictions/"]


def cmd_eval(s: Settings, out: Path) -> list[str]:
    pred_manifest = _locate(s["io.pred"], "predictions.csv", "io.pred")
    truth = {x.case_id: x for x in _load(s, s["data.split"] or None)}
    records = []
    preds = [read_volume(pred_manifest.parent / row["path"]) for row in read_manifest(pred_manifest)]
    k = s["eval.num_classes"] or max(_num_classes(list(truth.values())), _num_classes(preds))
    for pred in sorted(preds, key=lambda x: x.case_id):
        if pred.case_id not in truth:
            raise ContractError(f"prediction {pred.case_id!r} has no ground truth in {s['io.data']}")
        gt = truth[pred.case_id]
        records += evaluate(pred.labels, gt.labels, k, s["eval.tolerance_mm"], gt.spacing_mm, gt.case_id)
    write_records_csv(records, out / "metrics.csv")
    write_aggregate_csv(aggregate(records), out / "aggregate.csv")
    return ["metrics.csv", "aggregate.csv"]


def cmd_cv(s: Settings, out: Path) -> list[str]:
    samples = _load(s, s["data.split"] or "train")
    k = s["net.num_classes"] or _num_classes(samples)
    source = read_checkpoint(_locate(s["io.ckpt"], CHECKPOINT, "io.ckpt")) if s["io.ckpt"] else None
    phase = "finetune" if source else "pretrain"
    cfg = _train_config(s, phase, 0)
    seed = s["run.seed"]

    def trainer(train_cases, fold):
        fold_cfg = cfg.replace(seed=derive_seed(seed, f"train:{fold}"))
        if source is not None:
            _, _, net = finetune(source, train_cases, fold_cfg, config=source.config.replace(num_classes=k))
        else:
            net = build_network(_net_config(s, k), seed=derive_seed(seed, f"init:{fold}"))
            train(train_cases, net, fold_cfg)
        return lambda sample: _predict(net, sample, s)

    result = cross_validate(samples, s["cv.folds"], trainer, derive_seed(seed, "folds"), k, s["eval.tolerance_mm"])
    write_records_csv(result.records, out / "metrics.csv")
    write_aggregate_csv(result.table, out / "aggregate.csv")
    with (out / "folds.csv").open("w", encoding="utf-8") as fh:
        fh.write("case_id,fold\n")
        for case_id in sorted(result.fold_of):
            fh.write(f"{case_id},{result.fold_of[case_id]}\n")
    if result.degenerate:
        log.warning("cv with a single fold trains and validates on the same cases")
    return ["metrics.csv", "aggregate.csv", "folds.csv"]


def cmd_probe(s: Settings, out: Path) -> list[str]:
    net = read_checkpoint(_locate(s["io.ckpt"], CHECKPOINT, "io.ckpt")).to_network()
    samples = _load(s, s["data.split"] or "test")[: max(1, s["probe.cases"])]
    patch = _patch_size(s)
    batch = np.stack([_center_crop(x.image, patch) for x in samples])[:, None]
    layers = [name.strip() for name in s["probe.layers"].split(",") if name.strip()]
    known = set(layer_names(net))
    for name in layers:
        if name not in known:
            raise ConfigError("probe.layers", f"unknown layer {name!r}")
    bypass = s["probe.bypass_grn"]
    stats = [activation_stats(net, batch, name, bypass_grn=bypass) for name in layers]
    write_stats_csv(stats, out / "stats.csv")
    artifacts = ["stats.csv"]
    for name in layers:
        grid = f"grid_{name.replace('.', '_')}.pgm"
        export_activation_grid(net, batch[:1], name, out / grid, bypass_grn=bypass)
        artifacts.append(grid)
    return artifacts


def _center_crop(image: np.ndarray, patch) -> np.ndarray:
    pads = [(0, max(0, p - n)) for n, p in zip(image.shape, patch)]
    if any(a for _, a in pads):
        image = np.pad(image, pads, mode="reflect" if min(image.shape) > 1 else "symmetric")
    starts = [(n - p) // 2 for n, p in zip(image.shape, patch)]
    return image[tuple(slice(a, a + p) for a, p in zip(starts, patch))].astype(np.float32)


def cmd_report(s: Settings, out: Path) -> list[str]:
    entries = [e for e in (s["io.inputs"] or "").split(";") if e]
    if not entries:
        raise ConfigError("io.inputs", "report needs at least one input (--inputs)")
    rows = []
    seen = set()
    for entry in entries:
        label, sep, path = entry.rpartition("=")
        src = _locate(path if sep else entry, "aggregate.csv", "io.inputs")
        label = label if sep else (src.parent.name if src.name == "aggregate.csv" else src.stem)
        if label in seen:
            raise ConfigError("io.inputs", f"duplicate model label {label!r}; use label=path")
        seen.add(label)
        table: dict[str, dict] = {}
        for r in read_aggregate_csv(src):
            table.setdefault(r["class_id"], {})[r["statistic"]] = r
        for class_id, stats in table.items():
            if "mean" not in stats or "sd" not in stats:
                raise ContractError(f"{src}: class {class_id} lacks mean or sd rows")
            m, sd = stats["mean"], stats["sd"]
            rows.append([label, class_id, m["dsc"], sd["dsc"], m["nsd"], sd["nsd"], m["n"]])
    with (out / "report.csv").open("w", encoding="utf-8") as fh:
        fh.write("model,class_id,dsc_mean,dsc_sd,nsd_mean,nsd_sd,n\n")
        for label, class_id, *vals, n in rows:
            fh.write(",".join([label, class_id] + [repr(float(v)) for v in vals] + [str(n)]) + "\n")
    return ["report.csv"]


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "probe": cmd_probe,
    "report": cmd_report,
}


# -- entry point -----------------------------------------------------------------


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (ContractError, StructuralError)):
        return 3
    return 1


def _error_line(exc: BaseException, code: int) -> str:
    payload = {"status": "error", "exit_code": code, "type": type(exc).__name__}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
        payload["message"] = exc.message
    else:
        payload["message"] = str(exc)
    return json.dumps(payload)


def run(argv: Sequence[str] | None = None) -> int:
    """Execute one invocation and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
        settings = resolve_settings(args.command, args.config, _overrides(args))
        out = _prepare_out(Path(args.out), args.force)
        (out / SNAPSHOT).write_text(settings.text(), encoding="utf-8")
        handler = logging.FileHandler(out / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger("voxelnext")
        root.addHandler(handler)
        root.setLevel(logging.INFO)
        try:
            with ExitStack() as stack:
                _limit_threads(stack, settings["run.threads"])
                artifacts = HANDLERS[args.command](settings, out)
        finally:
            root.removeHandler(handler)
            handler.close()
        # Settings derived while running (phase defaults) are filled in now.
        (out / SNAPSHOT).write_text(settings.text(), encoding="utf-8")
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        code = _exit_code(exc)
        print(_error_line(exc, code).replace("\n", " "), file=sys.stderr)
        return code
    print(json.dumps({"status": "ok", "command": args.command, "out": str(out), "artifacts": [SNAPSHOT] + artifacts}))
    return 0


def main() -> None:
    sys.exit(run())
