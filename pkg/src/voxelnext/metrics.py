"""Overlap and surface metrics plus cross-validation bookkeeping."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractError

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MetricRecord:
    case_id: str
    class_id: int
    dsc: float
    nsd: float
    tolerance_mm: float
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not (0.0 <= self.dsc <= 1.0 and 0.0 <= self.nsd <= 1.0):
            raise ContractError(f"metric values out of [0, 1]: dsc={self.dsc}, nsd={self.nsd}")
        if min(self.spacing_mm) <= 0:
            raise ContractError("spacing must be strictly positive")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dsc(pred, gt) -> float:
    """``2 |P & G| / (|P| + |G|)``; 1 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    """Coordinates ``[N, 3]`` of foreground voxels with a 6-neighbour outside the mask or volume."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros((0, mask.ndim), dtype=np.int64)
    interior = ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)
    return np.argwhere(mask & ~interior)


def _within(points: np.ndarray, others: np.ndarray, spacing: np.ndarray, tol: float) -> np.ndarray:
    """Boolean per point: some point of ``others`` lies within ``tol`` (Euclidean, mm)."""
    a = points * spacing
    b = others * spacing
    tree = cKDTree(b)
    dist, _ = tree.query(a, k=1)
    hit = dist <= tol
    # Re-decide near-ties with the exact pairwise formula so results match brute force.
    close = np.flatnonzero(np.abs(dist - tol) <= 1e-9 * max(1.0, tol))
    for i in close:
        diff = (others - points[i]) * spacing
        hit[i] = bool(np.any(np.sqrt(np.sum(diff * diff, axis=1)) <= tol))
    return hit


def nsd(pred, gt, tolerance_mm: float = 1.0, spacing_mm=(1.0, 1.0, 1.0)) -> float:
    """Normalized surface distance: fraction of both surfaces within ``tolerance_mm`` of the other."""
    pred, gt = _pair(pred, gt)
    spacing = np.asarray(spacing_mm, dtype=np.float64)
    if tolerance_mm <= 0:
        raise ContractError(f"tolerance must be positive, got {tolerance_mm}")
    if spacing.shape != (pred.ndim,) or np.any(spacing <= 0):
        raise ContractError(f"spacing must be {pred.ndim} positive values, got {spacing_mm}")
    sp, sg = surface_voxels(pred), surface_voxels(gt)
    if len(sp) == 0 and len(sg) == 0:
        return 1.0
    if len(sp) == 0 or len(sg) == 0:
        return 0.0
    hits = int(_within(sp, sg, spacing, tolerance_mm).sum()) + int(_within(sg, sp, spacing, tolerance_mm).sum())
    return hits / (len(sp) + len(sg))


def evaluate(pred, gt, num_classes: int, tolerance_mm: float = 1.0, spacing_mm=(1.0, 1.0, 1.0), case_id: str = "") -> list[MetricRecord]:
    """One record per foreground class ``1..K-1``."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{name} labels outside [0, {num_classes})")
    spacing = tuple(float(s) for s in spacing_mm)
    return [
        MetricRecord(
            case_id, c, dsc(pred == c, gt == c), nsd(pred == c, gt == c, tolerance_mm, spacing), tolerance_mm, spacing
        )
        for c in range(1, num_classes)
    ]


# -- CSV output ----------------------------------------------------------------

RECORD_FIELDS = ("case_id", "class_id", "dsc", "nsd", "tolerance_mm")


def write_records_csv(records: Sequence[MetricRecord], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([r.case_id, r.class_id, repr(float(r.dsc)), repr(float(r.nsd)), repr(float(r.tolerance_mm))])
    return path


def read_records_csv(path) -> list[MetricRecord]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            MetricRecord(row["case_id"], int(row["class_id"]), float(row["dsc"]), float(row["nsd"]), float(row["tolerance_mm"]))
            for row in csv.DictReader(fh)
        ]


def aggregate(records: Sequence[MetricRecord]) -> list[dict]:
    """Mean and population sd of DSC/NSD per class and over all records."""
    rows = []
    groups: dict[str, list[MetricRecord]] = {}
    for r in records:
        groups.setdefault(str(r.class_id), []).append(r)
    groups["all"] = list(records)
    for key in sorted(groups, key=lambda k: (k == "all", k.zfill(6))):
        d = np.array([r.dsc for r in groups[key]])
        n = np.array([r.nsd for r in groups[key]])
        rows.append({"statistic": "mean", "class_id": key, "dsc": _stat(d, np.mean), "nsd": _stat(n, np.mean), "n": len(d)})
        rows.append({"statistic": "sd", "class_id": key, "dsc": _stat(d, np.std), "nsd": _stat(n, np.std), "n": len(d)})
    return rows


def _stat(values: np.ndarray, fn) -> float:
    return float(fn(values)) if values.size else math.nan


AGGREGATE_FIELDS = ("statistic", "class_id", "dsc", "nsd", "n")


def write_aggregate_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_FIELDS)
        for row in rows:
            writer.writerow([row["statistic"], row["class_id"], repr(row["dsc"]), repr(row["nsd"]), row["n"]])
    return path


def read_aggregate_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [
            {**row, "dsc": float(row["dsc"]), "nsd": float(row["nsd"]), "n": int(row["n"])}
            for row in csv.DictReader(fh)
        ]


# -- cross-validation ----------------------------------------------------------


def assign_folds(case_ids: Sequence[str], folds: int, seed: int) -> dict[str, int]:
    """Sort ids, shuffle with ``seed``, then deal round-robin into ``folds`` folds."""
    if folds < 1:
        raise ContractError("folds must be positive")
    if len(case_ids) < folds:
        raise ContractError(f"{len(case_ids)} cases cannot fill {folds} folds")
    ordered = sorted(case_ids)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    return {ordered[j]: i % folds for i, j in enumerate(perm)}


@dataclass
class CrossValidationResult:
    fold_of: dict[str, int]
    records: list[MetricRecord]
    table: list[dict]
    degenerate: bool

    def to_dict(self) -> dict:
        return {"fold_of": self.fold_of, "records": [asdict(r) for r in self.records], "table": self.table, "degenerate": self.degenerate}


def cross_validate(
    dataset,
    folds: int,
    trainer: Callable,
    seed: int = 0,
    num_classes: int | None = None,
    tolerance_mm: float = 1.0,
) -> CrossValidationResult:
    """K-fold evaluation.

    ``trainer(train_cases, fold)`` returns a predictor mapping a sample to a
    label map. With ``folds == 1`` every case is used for both training and
    validation and the result is flagged ``degenerate``.
    """
    ids = [s.case_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise ContractError("case ids must be unique")
    fold_of = assign_folds(ids, folds, seed)
    if num_classes is None:
        num_classes = int(max(s.labels.max() for s in dataset)) + 1
    records = []
    for f in range(folds):
        val = [s for s in dataset if fold_of[s.case_id] == f]
        train = [s for s in dataset if fold_of[s.case_id] != f] if folds > 1 else list(dataset)
        predict = trainer(train, f)
        for s in sorted(val, key=lambda s: s.case_id):
            records += evaluate(predict(s), s.labels, num_classes, tolerance_mm, s.spacing_mm, s.case_id)
    return CrossValidationResult(fold_of, records, aggregate(records), folds == 1)
