"""Volume loading, multi-view slicing, normalization, resizing and splits.

All functions here are pure: the same inputs (plus an explicit seed where
one applies) always produce the same outputs, so they are safe to call
from parallel data-loading workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .nifti import NiftiError, read_nifti

VIEWS = ("transaxial", "coronal", "sagittal")
_VIEW_AXIS = {"transaxial": 0, "coronal": 1, "sagittal": 2}
VIEW_ALIASES = {"t": "transaxial", "c": "coronal", "s": "sagittal"}

N_CLASSES = 8  # background + 7 structures
SLICE_SIZE = 160
MIN_VOLUME_DIM = 8


class DataError(Exception):
    """Base class for data-ingest failures."""


class VolumeFormatError(DataError):
    """The file exists but cannot be parsed as a volume."""


class ShapeMismatchError(DataError):
    """Image and label volumes do not share a shape."""


class InvalidInputError(DataError):
    """An array violates a basic precondition (NaN/Inf, bad labels, …)."""


def derive_seed(*parts: int) -> int:
    """Fold integer parts into one well-mixed 32-bit seed.

    Used everywhere a per-item seed is needed (per-sample augmentation,
    per-volume phantoms) so streams never collide across epochs, workers
    or stages.
    """
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def check_view(view: str) -> str:
    view = VIEW_ALIASES.get(view, view)
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}, expected one of {VIEWS}")
    return view


@dataclass
class Volume:
    """A 3-D intensity grid with an identifying tag."""

    voxels: np.ndarray  # (depth, height, width)
    id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise InvalidInputError(f"volume {self.id}: expected 3-D, got {self.voxels.shape}")
        if min(self.voxels.shape) < MIN_VOLUME_DIM:
            raise InvalidInputError(
                f"volume {self.id}: every dimension must be >= {MIN_VOLUME_DIM}, got {self.voxels.shape}"
            )
        if not np.all(np.isfinite(self.voxels)):
            raise InvalidInputError(f"volume {self.id}: non-finite intensities")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class LabelVolume:
    """Per-voxel class indices in {0..7}, paired with a Volume."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise InvalidInputError(f"labels: expected 3-D, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise InvalidInputError(
                f"labels outside {{0..{N_CLASSES - 1}}}: "
                f"range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class SliceSample:
    """One 2-D slice extracted from a volume.

    Fresh from slice_volume the image is at native resolution and scale;
    prepare_slice() brings it to the 160x160, [0, 1] form the models eat.
    """

    image: np.ndarray
    view: str
    volume_id: str
    slice_index: int
    mask: Optional[np.ndarray] = None


def load_volume(path, label_path=None):
    """Load a NIfTI volume and, optionally, its label volume.

    Returns (Volume, LabelVolume | None). The volume id is the filename
    stem. Distinct error kinds: FileNotFoundError for a missing path,
    VolumeFormatError for an unreadable file, ShapeMismatchError when the
    label grid does not match the image grid.
    """
    path = Path(path)
    try:
        voxels = read_nifti(path)
    except NiftiError as exc:
        raise VolumeFormatError(str(exc)) from exc
    vol_id = path.name.removesuffix(".gz").removesuffix(".nii")
    volume = Volume(voxels=voxels.astype(np.float32), id=vol_id)

    labels = None
    if label_path is not None:
        try:
            label_arr = read_nifti(label_path)
        except NiftiError as exc:
            raise VolumeFormatError(str(exc)) from exc
        if label_arr.shape != voxels.shape:
            raise ShapeMismatchError(
                f"{path}: label shape {label_arr.shape} != image shape {voxels.shape}"
            )
        labels = LabelVolume(labels=np.rint(label_arr).astype(np.int64))
    return volume, labels


def slice_volume(volume: Volume, labels: Optional[LabelVolume], view: str) -> list[SliceSample]:
    """Extract every slice of a volume along one anatomical view.

    Slices come back at native resolution; together they partition the
    volume exactly (stacking them along the view axis reconstructs it).
    """
    view = check_view(view)
    if labels is not None and labels.shape != volume.shape:
        raise ShapeMismatchError(
            f"volume {volume.id}: label shape {labels.shape} != {volume.shape}"
        )
    axis = _VIEW_AXIS[view]
    out = []
    for i in range(volume.shape[axis]):
        img = np.take(volume.voxels, i, axis=axis)
        mask = np.take(labels.labels, i, axis=axis) if labels is not None else None
        out.append(SliceSample(image=img, view=view, volume_id=volume.id, slice_index=i, mask=mask))
    return out


def normalize_minmax(img: np.ndarray) -> np.ndarray:
    """Map an image affinely onto [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float32)
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("normalize_minmax: non-finite values")
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def resize_slice(img: np.ndarray, size: int = SLICE_SIZE, *, is_mask: bool = False) -> np.ndarray:
    """Resize to size x size: bilinear for images, nearest for masks."""
    img = np.asarray(img)
    if img.shape == (size, size):
        return img.copy()
    if is_mask:
        out = cv2.resize(
            img.astype(np.int16), (size, size), interpolation=cv2.INTER_NEAREST
        )
        return out.astype(img.dtype)
    return cv2.resize(img.astype(np.float32), (size, size), interpolation=cv2.INTER_LINEAR)


def prepare_slice(s: SliceSample, size: int = SLICE_SIZE) -> SliceSample:
    """Normalize and resize a raw slice into model-ready form."""
    img = resize_slice(normalize_minmax(s.image), size)
    mask = resize_slice(s.mask, size, is_mask=True) if s.mask is not None else None
    return SliceSample(
        image=np.clip(img, 0.0, 1.0),
        view=s.view,
        volume_id=s.volume_id,
        slice_index=s.slice_index,
        mask=mask,
    )


def downsample_labels(mask: np.ndarray, stride: int) -> np.ndarray:
    """Subsample a label grid with a fixed stride (top-left anchor)."""
    mask = np.asarray(mask)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = mask.shape
    if h % stride or w % stride:
        raise ValueError(f"stride {stride} does not divide mask shape {mask.shape}")
    return mask[::stride, ::stride].copy()


@dataclass
class DatasetSplit:
    """A deterministic 2:1:1 train/val/test split over volume ids."""

    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    labeled_ids: list[str]
    seed: int

    def __post_init__(self):
        groups = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        total = sum(len(g) for g in groups)
        if len(groups[0] | groups[1] | groups[2]) != total:
            raise ValueError("split groups are not disjoint")
        if not set(self.labeled_ids) <= groups[0]:
            raise ValueError("labeled ids must be a subset of the train ids")

    @property
    def labeled_fraction(self) -> float:
        return len(self.labeled_ids) / len(self.train_ids)

    @property
    def all_ids(self) -> list[str]:
        return list(self.train_ids) + list(self.val_ids) + list(self.test_ids)

    def save(self, path) -> None:
        payload = {
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
            "labeled": list(self.labeled_ids),
            "seed": self.seed,
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        payload = json.loads(Path(path).read_text())
        return cls(
            train_ids=payload["train"],
            val_ids=payload["val"],
            test_ids=payload["test"],
            labeled_ids=payload["labeled"],
            seed=payload["seed"],
        )


def split_dataset(ids: Sequence[str], labeled_fraction: float, seed: int) -> DatasetSplit:
    """Shuffle ids with the given seed and split them 2:1:1.

    Within the train portion, ceil(labeled_fraction * n_train) ids are
    marked labeled; the selection is part of the same shuffle, so one
    seed pins the whole split.
    """
    ids = list(ids)
    if len(ids) < 4:
        raise ValueError(f"need at least 4 ids to split 2:1:1, got {len(ids)}")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    n_val = n // 4
    n_test = n // 4
    train = order[: n - n_val - n_test]
    val = order[n - n_val - n_test : n - n_test]
    test = order[n - n_test :]
    n_labeled = int(np.ceil(labeled_fraction * len(train)))
    return DatasetSplit(
        train_ids=train,
        val_ids=val,
        test_ids=test,
        labeled_ids=train[:n_labeled],
        seed=seed,
    )


@dataclass
class ManifestEntry:
    image: str
    label: Optional[str] = None
    id: Optional[str] = None


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    payload = [
        {"image": e.image, "label": e.label, "id": e.id}
        for e in entries
    ]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_manifest(path) -> list[ManifestEntry]:
    """Read an index manifest: a JSON list of {image, label, id} records."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such manifest: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, list):
        raise VolumeFormatError(f"{path}: manifest must be a JSON list")
    entries = []
    for rec in payload:
        unknown = set(rec) - {"image", "label", "id"}
        if unknown:
            raise VolumeFormatError(f"{path}: unknown manifest keys {sorted(unknown)}")
        if "image" not in rec:
            raise VolumeFormatError(f"{path}: manifest record missing 'image'")
        entries.append(ManifestEntry(image=rec["image"], label=rec.get("label"), id=rec.get("id")))
    return entries


def load_manifest_volumes(path, ids: Optional[Sequence[str]] = None):
    """Load (Volume, LabelVolume | None) pairs listed in a manifest.

    Relative paths resolve against the manifest's directory. When `ids`
    is given, only matching volumes load, in manifest order.
    """
    path = Path(path)
    base = path.parent
    wanted = set(ids) if ids is not None else None
    out = []
    for entry in read_manifest(path):
        img_path = base / entry.image if not Path(entry.image).is_absolute() else Path(entry.image)
        vol_id = entry.id or img_path.name.removesuffix(".gz").removesuffix(".nii")
        if wanted is not None and vol_id not in wanted:
            continue
        label_path = None
        if entry.label is not None:
            label_path = base / entry.label if not Path(entry.label).is_absolute() else Path(entry.label)
        volume, labels = load_volume(img_path, label_path)
        volume.id = vol_id
        out.append((volume, labels))
    return out


def slice_bank(
    volumes,
    views: Sequence[str],
    slice_step: int = 1,
    drop_empty: bool = False,
    size: int = SLICE_SIZE,
) -> list[SliceSample]:
    """Extract and prepare slices from many volumes across views.

    slice_step thins the stack (every step-th slice) to keep desk-scale
    epochs cheap; drop_empty removes slices whose mask is all background
    (off by default: every slice trains unless asked otherwise).
    """
    bank = []
    for volume, labels in volumes:
        for view in views:
            for s in slice_volume(volume, labels, check_view(view))[::slice_step]:
                if drop_empty and s.mask is not None and not s.mask.any():
                    continue
                bank.append(prepare_slice(s, size))
    return bank
