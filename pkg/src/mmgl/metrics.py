"""Segmentation metrics and volume-level evaluation.

Conventions: mIoU and pixel accuracy include the background class; Dice
is reported per foreground structure and averaged over the structures
actually present (in truth or prediction), so vacuous classes never
inflate the mean. Volumes are scored by stacking per-slice predictions
back into 3-D first.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .data import (
    LabelVolume,
    N_CLASSES,
    ShapeMismatchError,
    Volume,
    normalize_minmax,
    resize_slice,
)

FOREGROUND_CLASSES = tuple(range(1, N_CLASSES))


def _check_shapes(pred, true):
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeMismatchError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return pred, true


def dice_score(pred, true, cls: int) -> float:
    """2|P∩G| / (|P|+|G|) for one class; 1.0 when both sides are empty."""
    pred, true = _check_shapes(pred, true)
    p = pred == cls
    g = true == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def miou(pred, true, n_classes: int = N_CLASSES) -> float:
    """Mean IoU over every class present in truth or prediction."""
    pred, true = _check_shapes(pred, true)
    ious = []
    for cls in range(n_classes):
        p = pred == cls
        g = true == cls
        union = int(np.logical_or(p, g).sum())
        if union == 0:
            continue
        ious.append(int(np.logical_and(p, g).sum()) / union)
    return float(np.mean(ious)) if ious else 1.0

def pixel_accuracy(pred, true) -> float:
    pred, true = _check_shapes(pred, true)
    return float(np.mean(pred == true))


def per_class_dice(pred, true) -> list[Optional[float]]:
    """Dice for classes 1..7; None where a class is absent from both."""
    pred, true = _check_shapes(pred, true)
    out = []
    for cls in FOREGROUND_CLASSES:
        if not (pred == cls).any() and not (true == cls).any():
            out.append(None)
        else:
            out.append(dice_score(pred, true, cls))
    return out


def mean_foreground_dice(pred, true) -> float:
    values = [v for v in per_class_dice(pred, true) if v is not None]
    return float(np.mean(values)) if values else 1.0


@dataclass
class MetricsRecord:
    run: str
    seed: int
    labeled_fraction: float
    class_dice: tuple  # 7 entries, None for classes absent from both masks
    mean_dice: float
    miou: float
    pixacc: float

    def __post_init__(self):
        self.class_dice = tuple(self.class_dice)
        if len(self.class_dice) != len(FOREGROUND_CLASSES):
            raise ValueError(f"expected {len(FOREGROUND_CLASSES)} class dice values")
        for v in list(self.class_dice) + [self.mean_dice, self.miou, self.pixacc]:
            if v is not None and not 0.0 <= v <= 1.0 + 1e-9:
                raise ValueError(f"metric out of [0,1]: {v}")

    def to_row(self) -> dict:
        row = {
            "run": self.run,
            "seed": self.seed,
            "labeled_fraction": self.labeled_fraction,
        }
        for i, v in enumerate(self.class_dice, start=1):
            row[f"class_{i}_dice"] = "" if v is None else f"{v:.6f}"
        row["mean_dice"] = f"{self.mean_dice:.6f}"
        row["miou"] = f"{self.miou:.6f}"
        row["pixacc"] = f"{self.pixacc:.6f}"
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MetricsRecord":
        class_dice = tuple(
            None if row[f"class_{i}_dice"] in ("", None) else float(row[f"class_{i}_dice"])
            for i in range(1, len(FOREGROUND_CLASSES) + 1)
        )
        return cls(
            run=row["run"],
            seed=int(row["seed"]),
            labeled_fraction=float(row["labeled_fraction"]),
            class_dice=class_dice,
            mean_dice=float(row["mean_dice"]),
            miou=float(row["miou"]),
            pixacc=float(row["pixacc"]),
        )

CSV_COLUMNS = (
    ["run", "seed", "labeled_fraction"]
    + [f"class_{i}_dice" for i in range(1, len(FOREGROUND_CLASSES) + 1)]
    + ["mean_dice", "miou", "pixacc"]
)


def record_from_masks(pred, true, run: str, seed: int, labeled_fraction: float) -> MetricsRecord:
    class_dice = per_class_dice(pred, true)
    present = [v for v in class_dice if v is not None]
    return MetricsRecord(
        run=run,
        seed=seed,
        labeled_fraction=labeled_fraction,
        class_dice=tuple(class_dice),
        mean_dice=float(np.mean(present)) if present else 1.0,
        miou=miou(pred, true),
        pixacc=pixel_accuracy(pred, true),
    )


def predict_volume(
    model,
    volume: Volume,
    batch_size: int = 16,
    slice_step: int = 1,
) -> np.ndarray:
    """Predict every slice_step-th transaxial slice, stacked back to 3-D.

    Slices are normalized, resized to the model's input size, predicted,
    then the argmax masks are nearest-resized back to the native slice
    shape. Skipped slices (slice_step > 1) are filled from the nearest
    predicted slice above, which keeps the output shape equal to the
    volume shape.
    """
    model.eval()
    size = model.cfg.input_size
    depth, h, w = volume.shape
    picked = list(range(0, depth, slice_step))
    prepared = np.stack(
        [resize_slice(normalize_minmax(volume.voxels[i]), size) for i in picked]
    ).astype(np.float32)

    masks = []
    with torch.no_grad():
        for start in range(0, len(picked), batch_size):
            x = torch.from_numpy(prepared[start : start + batch_size])
            masks.append(model.predict_mask(x).numpy())
    pred160 = np.concatenate(masks, axis=0)

    out = np.zeros((depth, h, w), dtype=np.int64)
    for j, i in enumerate(picked):
        native = _resize_mask_to(pred160[j], (h, w))
        until = picked[j + 1] if j + 1 < len(picked) else depth
        out[i:until] = native
    return out


def _resize_mask_to(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    if mask.shape == (h, w):
        return mask.astype(np.int64)
    out = cv2.resize(mask.astype(np.int16), (w, h), interpolation=cv2.INTER_NEAREST)
    return out.astype(np.int64)


def evaluate_volume(
    model,
    volume: Volume,
    labels: LabelVolume,
    run: str = "eval",
    seed: int = 0,
    labeled_fraction: float = 1.0,
    slice_step: int = 1,
) -> MetricsRecord:
    """Volume-level metrics from stacked transaxial predictions."""
    if labels is None:
        raise ValueError(f"volume {volume.id}: labels required for evaluation")
    if labels.shape != volume.shape:
        raise ShapeMismatchError(
            f"volume {volume.id}: label shape {labels.shape} != {volume.shape}"
        )
    pred = predict_volume(model, volume, slice_step=slice_step)
    return record_from_masks(pred, labels.labels, run, seed, labeled_fraction)


def aggregate_records(
    records: Sequence[MetricsRecord],
    run: str,
    seed: int,
    labeled_fraction: float,
) -> MetricsRecord:
    """Mean over volumes; per-class means skip volumes where a class is
    absent from both masks."""
    if not records:
        raise ValueError("no records to aggregate")
    class_dice = []
    for i in range(len(FOREGROUND_CLASSES)):
        vals = [r.class_dice[i] for r in records if r.class_dice[i] is not None]
        class_dice.append(float(np.mean(vals)) if vals else None)
    present = [v for v in class_dice if v is not None]
    return MetricsRecord(
        run=run,
        seed=seed,
        labeled_fraction=labeled_fraction,
        class_dice=tuple(class_dice),
        mean_dice=float(np.mean(present)) if present else 1.0,
        miou=float(np.mean([r.miou for r in records])),
        pixacc=float(np.mean([r.pixacc for r in records])),
    )


def write_records_csv(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in records:
            writer.writerow(r.to_row())


def read_records_csv(path) -> list[MetricsRecord]:
    """Read record rows; aggregate-block rows (seed is 'mean'/'std') are skipped."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                int(row["seed"])
            except (ValueError, TypeError):
                continue
            out.append(MetricsRecord.from_row(row))
    return out


def write_records_json(records: Sequence[MetricsRecord], path) -> None:
    payload = []
    for r in records:
        payload.append(
            {
                "run": r.run,
                "seed": r.seed,
                "labeled_fraction": r.labeled_fraction,
                "class_dice": list(r.class_dice),
                "mean_dice": r.mean_dice,
                "miou": r.miou,
                "pixacc": r.pixacc,
            }
        )
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_records_json(path) -> list[MetricsRecord]:
    payload = json.loads(Path(path).read_text())
    return [
        MetricsRecord(
            run=rec["run"],
            seed=rec["seed"],
            labeled_fraction=rec["labeled_fraction"],
            class_dice=tuple(rec["class_dice"]),
            mean_dice=rec["mean_dice"],
            miou=rec["miou"],
            pixacc=rec["pixacc"],
        )
        for rec in payload
    ]
