"""Synthetic phantoms, preprocessing and the on-disk volume format."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, PlacementError, VolumeFormatError

VOLUME_FORMAT = "voxelnext-vol-1"
MAX_PLACEMENT_ATTEMPTS = 16


def derive_seed(seed: int, key: str) -> int:
    """Deterministic 63-bit seed for a named sub-stream: ``sha256(f"{seed}:{key}")``."""
    digest = hashlib.sha256(f"{int(seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


@dataclass
class VolumeSample:
    image: np.ndarray
    labels: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.labels = np.asarray(self.labels)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.image.ndim != 3 or self.image.shape != self.labels.shape:
            raise ContractError(
                f"image {self.image.shape} and labels {self.labels.shape} must be matching 3-D volumes"
            )
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ContractError(f"spacing must be three positive values, got {self.spacing_mm}")

    @property
    def extents(self) -> tuple[int, int, int]:
        return self.image.shape


# -- phantoms ----------------------------------------------------------------


def _default_intensities() -> dict:
    return {
        "background": (0.0, 0.1),
        "organ": ((1.0, 0.1), (2.0, 0.1), (3.0, 0.1)),
        "lesion": (-1.0, 0.1),
        "anchor": (1.5, 0.1),
        "target": (1.5, 0.1),
    }


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one synthetic volume.

    Organs are randomly rotated ellipsoids (semi-axes drawn from
    ``organ_axes``); lesions are spheres placed strictly inside an organ. In
    ``context_pair`` mode the volume instead holds an elongated anchor in the
    far half along depth and a small spherical target next to the ``depth=0``
    face: the target is class 2 when the anchor's long axis runs along H and
    class 3 when it runs along W (the anchor itself is class 1).
    """

    extents: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 2
    organ_count: tuple[int, int] = (1, 1)
    organ_axes: tuple[float, float] = (6.0, 11.0)
    organ_classes: int = 1
    label_organs: bool = True
    lesion_count: tuple[int, int] = (0, 0)
    lesion_radius: tuple[float, float] = (1.5, 3.0)
    context_pair: bool = False
    target_radius: float = 2.5
    anchor_axes: tuple[float, float] = (9.0, 2.5)
    intensities: dict = field(default_factory=_default_intensities, hash=False, compare=False)
    noise_sd: float = 0.3
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def class_layout(self) -> dict[str, int | list[int]]:
        if self.context_pair:
            return {"anchor": 1, "target_h": 2, "target_w": 3}
        layout: dict[str, int | list[int]] = {}
        nxt = 1
        if self.label_organs:
            layout["organ"] = list(range(1, self.organ_classes + 1))
            nxt += self.organ_classes
        if self.lesion_count[1] > 0:
            layout["lesion"] = nxt
        return layout

    def expected_classes(self) -> int:
        if self.context_pair:
            return 4
        layout = self.class_layout()
        return 1 + len(layout.get("organ", [])) + ("lesion" in layout)

    def validate(self) -> None:
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ContractError(f"extents must be three positive integers, got {self.extents}")
        if self.num_classes != self.expected_classes():
            raise ContractError(
                f"num_classes={self.num_classes} but the class layout needs {self.expected_classes()}"
            )
        lo, hi = self.organ_count
        if lo < 0 or hi < lo or (not self.context_pair and hi < 1):
            raise ContractError(f"invalid organ_count range {self.organ_count}")
        if self.organ_axes[0] <= 0 or self.organ_axes[1] < self.organ_axes[0]:
            raise ContractError(f"invalid organ_axes range {self.organ_axes}")
        if self.lesion_count[0] < 0 or self.lesion_count[1] < self.lesion_count[0]:
            raise ContractError(f"invalid lesion_count range {self.lesion_count}")
        if self.lesion_count[1] > 0 and not 0 < self.lesion_radius[1] < self.organ_axes[0]:
            raise ContractError("lesion radius must be positive and below the organ minor axis")
        if self.organ_classes < 1 or self.noise_sd < 0:
            raise ContractError("organ_classes must be positive and noise_sd nonnegative")


def _rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _grid(extents) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents], indexing="ij"), -1)


def _ellipsoid(grid, center, axes, rot) -> np.ndarray:
    local = (grid - np.asarray(center)) @ rot
    return np.sum((local / np.asarray(axes)) ** 2, axis=-1) <= 1.0


def _fill(image, mask, stats, rng):
    mean, sd = stats
    image[mask] = rng.normal(mean, sd, size=int(mask.sum()))


def _attempt(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ext = tuple(spec.extents)
    grid = _grid(ext)
    inten = spec.intensities
    image = rng.normal(*inten["background"], size=ext)
    labels = np.zeros(ext, dtype=np.int64)

    if spec.context_pair:
        long_ax, short_ax = spec.anchor_axes
        along_h = bool(rng.integers(2))
        axes = (short_ax, long_ax, short_ax) if along_h else (short_ax, short_ax, long_ax)
        margin = int(np.ceil(long_ax)) + 1
        depth = ext[0] - short_ax - 1.5
        center = (depth, rng.uniform(margin, ext[1] - 1 - margin), rng.uniform(margin, ext[2] - 1 - margin))
        anchor = _ellipsoid(grid, center, axes, np.eye(3))
        tr = spec.target_radius
        tcenter = (tr + 1.0, rng.uniform(tr + 1, ext[1] - 2 - tr), rng.uniform(tr + 1, ext[2] - 2 - tr))
        target = _ellipsoid(grid, tcenter, (tr, tr, tr), np.eye(3))
        if not anchor.any() or not target.any() or (anchor & target).any():
            raise PlacementError("context pair could not be placed")
        _fill(image, anchor, inten["anchor"], rng)
        _fill(image, target, inten["target"], rng)
        labels[anchor] = 1
        labels[target] = 2 if along_h else 3
    else:
        layout = spec.class_layout()
        n_organs = int(rng.integers(spec.organ_count[0], spec.organ_count[1] + 1))
        organ_masks = []
        for i in range(n_organs):
            axes = rng.uniform(*spec.organ_axes, size=3)
            reach = axes.max() + 1
            center = [rng.uniform(min(reach, n / 2), max(n - 1 - reach, n / 2)) for n in ext]
            mask = _ellipsoid(grid, center, axes, _rotation(rng))
            if not mask.any():
                raise PlacementError(f"organ {i} fell outside the volume")
            cls = i % spec.organ_classes
            _fill(image, mask, inten["organ"][cls % len(inten["organ"])], rng)
            if spec.label_organs:
                labels[mask] = layout["organ"][cls]
            organ_masks.append(mask)
        n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        for i in range(n_lesions):
            host = organ_masks[int(rng.integers(len(organ_masks)))]
            radius = rng.uniform(*spec.lesion_radius)
            depth = ndimage.distance_transform_edt(np.pad(host, 1))[1:-1, 1:-1, 1:-1]
            candidates = np.argwhere(depth >= radius + 1.0)
            if len(candidates) == 0:
                raise PlacementError(f"lesion {i} does not fit inside its host organ")
            center = candidates[int(rng.integers(len(candidates)))]
            mask = _ellipsoid(grid, center, (radius, radius, radius), np.eye(3)) & host
            _fill(image, mask, inten["lesion"], rng)
            labels[mask] = layout["lesion"]
        present = set(np.unique(labels).tolist())
        wanted = set(range(spec.num_classes))
        if n_lesions == 0:
            wanted.discard(layout.get("lesion", -1))
        if not wanted <= present:
            raise PlacementError(f"classes {sorted(wanted - present)} have no voxels")
    if spec.noise_sd:
        image = image + rng.normal(0.0, spec.noise_sd, size=ext)
    return image.astype(np.float32), labels


def generate_phantom(spec: PhantomSpec, case_id: str | None = None) -> VolumeSample:
    """Deterministic synthetic volume; retries with perturbed seeds on placement failure."""
    spec.validate()
    last = None
    for attempt in range(MAX_PLACEMENT_ATTEMPTS):
        rng = np.random.default_rng([spec.seed, attempt])
        try:
            image, labels = _attempt(spec, rng)
        except PlacementError as exc:
            last = exc
            continue
        return VolumeSample(image, labels, spec.spacing_mm, case_id or f"phantom_{spec.seed}")
    raise PlacementError(f"placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts: {last}")


def organ_task(extent: int = 32, seed: int = 0, **kw) -> PhantomSpec:
    """One labelled organ per volume (binary segmentation)."""
    return PhantomSpec(extents=(extent,) * 3, num_classes=2, seed=seed, **kw)


def multiclass_task(extent: int = 32, seed: int = 0, **kw) -> PhantomSpec:
    """Two organ classes plus lesions inside them (pretraining corpus)."""
    base = dict(
        extents=(extent,) * 3, num_classes=4, organ_count=(2, 3), organ_axes=(5.0, 9.0),
        organ_classes=2, lesion_count=(1, 3), lesion_radius=(1.5, 3.0), seed=seed,
    )
    base.update(kw)
    return PhantomSpec(**base)


def lesion_task(extent: int = 32, seed: int = 0, **kw) -> PhantomSpec:
    """Organs present in the image but only lesions labelled."""
    base = dict(
        extents=(extent,) * 3, num_classes=2, organ_count=(2, 3), organ_axes=(5.0, 9.0),
        organ_classes=2, label_organs=False, lesion_count=(1, 3), lesion_radius=(1.5, 3.0), seed=seed,
    )
    base.update(kw)
    return PhantomSpec(**base)


def context_task(extent: int = 48, seed: int = 0, **kw) -> PhantomSpec:
    """Target whose class depends on a distant anchor's orientation."""
    return PhantomSpec(
        extents=(extent,) * 3, num_classes=4, organ_count=(0, 0), context_pair=True, seed=seed, **kw
    )


TASKS = {"organ": organ_task, "multiclass": multiclass_task, "lesion": lesion_task, "context": context_task}


def generate_dataset(task: str, n_cases: int, seed: int, extent: int | None = None, **kw) -> list[VolumeSample]:
    """``n_cases`` phantoms of a named task, case ``i`` seeded with ``derive_seed(seed, case_id)``."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    factory = TASKS[task]
    out = []
    for i in range(n_cases):
        case_id = f"{task}_{i:04d}"
        args = dict(seed=derive_seed(seed, case_id), **kw)
        if extent is not None:
            args["extent"] = extent
        out.append(generate_phantom(factory(**args), case_id))
    return out


# -- preprocessing -----------------------------------------------------------


def zscore_normalize(image: np.ndarray) -> np.ndarray:
    """Subtract the mean and divide by the population standard deviation."""
    image = np.asarray(image)
    work = image.astype(np.float64)
    sd = work.std() if work.size >= 2 else 0.0
    if sd == 0:
        warnings.warn("z-score normalisation of a constant image; returning zeros", RuntimeWarning, stacklevel=2)
        return np.zeros_like(image, dtype=np.float32)
    return ((work - work.mean()) / sd).astype(np.float32)


def resample_isotropic(sample: VolumeSample, target_mm: float) -> VolumeSample:
    """Trilinear (image) / nearest (labels) resampling to ``target_mm`` spacing.

    Voxel centres are aligned at half-voxel offsets: output index ``j`` maps to
    input coordinate ``(j + 0.5) * target / spacing - 0.5``, clamped at the edges.
    """
    if target_mm <= 0:
        raise ContractError(f"target spacing must be positive, got {target_mm}")
    spacing = np.asarray(sample.spacing_mm, dtype=np.float64)
    old = np.asarray(sample.extents)
    new = tuple(int(round(n)) for n in old * spacing / target_mm)
    if min(new) < 1:
        raise ContractError(f"resampling to {target_mm} mm gives degenerate extents {new}")
    scale = target_mm / spacing
    offset = 0.5 * scale - 0.5
    image = ndimage.affine_transform(
        sample.image.astype(np.float64), np.diag(scale), offset=offset, output_shape=new, order=1, mode="nearest"
    ).astype(np.float32)
    coords = [np.clip(np.rint((np.arange(n) + 0.5) * s - 0.5), 0, o - 1).astype(np.intp)
              for n, s, o in zip(new, scale, old)]
    labels = sample.labels[np.ix_(*coords)]
    return VolumeSample(image, labels, (float(target_mm),) * 3, sample.case_id)


# -- volume files ------------------------------------------------------------


def _blob_path(header: Path) -> Path:
    return header.with_name(header.stem + ".raw")


def write_volume(sample: VolumeSample, path) -> Path:
    """JSON header at ``path`` plus a ``.raw`` blob: float32 image then uint16 labels."""
    path = Path(path)
    labels = np.asarray(sample.labels)
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
        raise ContractError("labels do not fit into 16-bit unsigned integers")
    image_bytes = np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    label_bytes = np.ascontiguousarray(labels, dtype="<u2").tobytes()
    header = {
        "format_version": VOLUME_FORMAT,
        "case_id": sample.case_id,
        "extents": list(sample.extents),
        "spacing_mm": list(sample.spacing_mm),
        "image_dtype": "float32-le",
        "label_dtype": "uint16-le",
        "blob": _blob_path(path).name,
        "image_nbytes": len(image_bytes),
        "label_nbytes": len(label_bytes),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _blob_path(path).write_bytes(image_bytes + label_bytes)
    path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_volume(path) -> VolumeSample:
    path = Path(path)
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: cannot parse volume header ({exc})") from exc
    if not isinstance(header, dict) or "format_version" not in header:
        raise VolumeFormatError(f"{path}: bad magic, not a volume header")
    if header["format_version"] != VOLUME_FORMAT:
        raise VolumeFormatError(
            f"{path}: unsupported volume version {header['format_version']!r} (expected {VOLUME_FORMAT})"
        )
    ext = tuple(int(n) for n in header["extents"])
    n = int(np.prod(ext))
    expected = 4 * n + 2 * n
    blob_path = path.with_name(header["blob"])
    try:
        blob = blob_path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"{blob_path}: cannot read blob ({exc})") from exc
    if len(blob) != expected:
        raise VolumeFormatError(
            f"{blob_path}: size mismatch, expected {expected} bytes for extents {ext}, found {len(blob)}"
        )
    image = np.frombuffer(blob, dtype="<f4", count=n).reshape(ext).astype(np.float32)
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=4 * n).reshape(ext).astype(np.int64)
    return VolumeSample(image, labels, tuple(header["spacing_mm"]), header.get("case_id", ""))


# -- dataset manifests -------------------------------------------------------

MANIFEST_FIELDS = ("case_id", "path", "split", "fold")


def write_manifest(rows: Iterable[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in MANIFEST_FIELDS})
    return path


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if not set(MANIFEST_FIELDS) <= set(row):
            raise VolumeFormatError(f"{path}: manifest needs columns {MANIFEST_FIELDS}")
    return rows


def load_dataset(manifest_path, split: str | None = None) -> list[VolumeSample]:
    """Read every volume listed in a manifest (paths relative to the manifest)."""
    manifest_path = Path(manifest_path)
    rows = read_manifest(manifest_path)
    return [
        read_volume(manifest_path.parent / row["path"])
        for row in rows
        if split is None or row["split"] == split
    ]


def preprocess(sample: VolumeSample, target_mm: float | None = None) -> VolumeSample:
    """Optional isotropic resampling followed by z-score normalisation."""
    if target_mm is not None:
        sample = resample_isotropic(sample, target_mm)
    return replace(sample, image=zscore_normalize(sample.image))


def split_cases(samples: Sequence[VolumeSample], n_train: int) -> tuple[list, list]:
    return list(samples[:n_train]), list(samples[n_train:])
