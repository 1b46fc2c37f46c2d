"""Ablation ladder, aggregate tables and figure output.

The five arms re-run the pipeline with components toggled: a plain
supervised baseline, deep supervision, single-view then multi-view
global pre-training, and the full staged workflow with local supervised
pre-training on top.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .config import Config
from .metrics import (
    MetricsRecord,
    aggregate_records,
    evaluate_volume,
    write_records_csv,
    write_records_json,
    CSV_COLUMNS,
)
from .model import SegmentationModel
from .trainer import (
    Checkpoint,
    PipelineData,
    STAGE_FINETUNE,
    STAGE_GLOBAL,
    STAGE_LOCAL,
    StageConfig,
    finetune,
    finetune_bank,
    global_bank,
    local_bank,
    pretrain_global,
    pretrain_local,
    val_bank,
)

# label colors for overlays, background first (b, g, r) as cv2 writes them
PALETTE = np.array(
    [
        (0, 0, 0),
        (60, 76, 231),
        (113, 204, 46),
        (219, 152, 52),
        (34, 126, 230),
        (182, 89, 155),
        (43, 57, 192),
        (133, 160, 22),
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class ArmSpec:
    name: str
    global_pretrain: bool
    multi_view: bool
    local_pretrain: bool
    deep_supervision: bool


ARMS = {
    "random": ArmSpec("random", False, False, False, False),
    "+ds": ArmSpec("+ds", False, False, False, True),
    "+ds+mg": ArmSpec("+ds+mg", True, False, False, True),
    "+ds+mg+mv": ArmSpec("+ds+mg+mv", True, True, False, True),
    "mmgl": ArmSpec("mmgl", True, True, True, True),
}
ARM_ORDER = ("random", "+ds", "+ds+mg", "+ds+mg+mv", "mmgl")


def evaluate_checkpoint(
    ckpt: Checkpoint,
    volumes,
    run: str,
    seed: int,
    labeled_fraction: float,
    slice_step: int = 1,
):
    """Per-volume records plus their mean for a finished checkpoint."""
    model = SegmentationModel(ckpt.model_config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    records = [
        evaluate_volume(
            model, v, l, run=run, seed=seed,
            labeled_fraction=labeled_fraction, slice_step=slice_step,
        )
        for v, l in volumes
    ]
    return records, aggregate_records(records, run, seed, labeled_fraction)


def run_arm(
    arm: ArmSpec,
    data: PipelineData,
    cfg: Config,
    seed: int,
    out_dir=None,
) -> MetricsRecord:
    """Train one ablation arm end-to-end and score it on the test split."""
    if not arm.deep_supervision:
        cfg = dataclasses.replace(
            cfg, losses=dataclasses.replace(cfg.losses, lambda_dice=(0.0, 0.0, 1.0))
        )
    out_dir = Path(out_dir) if out_dir is not None else None

    def stage_dir(name):
        if out_dir is None:
            return None
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    ckpt = None
    if arm.global_pretrain:
        views = cfg.data.views if arm.multi_view else ("transaxial",)
        sc = cfg.stages.global_stage
        stage_cfg = StageConfig(
            stage=STAGE_GLOBAL, epochs=sc.epochs, batch_size=sc.batch_size,
            learning_rate=sc.learning_rate, views=views, seed=seed,
            slice_step=sc.slice_step, lr_schedule=sc.lr_schedule,
        )
        bank = global_bank(data, views, sc.slice_step, size=cfg.model.input_size)
        ckpt = pretrain_global(bank, stage_cfg, cfg, out_dir=stage_dir("global"))

    if arm.local_pretrain:
        sc = cfg.stages.local_stage
        stage_cfg = StageConfig(
            stage=STAGE_LOCAL, epochs=sc.epochs, batch_size=sc.batch_size,
            learning_rate=sc.learning_rate, views=cfg.data.views, seed=seed,
            slice_step=sc.slice_step, freeze_encoder=sc.freeze_encoder,
            lr_schedule=sc.lr_schedule,
        )
        bank = local_bank(data, cfg.data.views, sc.slice_step, cfg.data.drop_empty,
                          size=cfg.model.input_size)
        ckpt = pretrain_local(bank, stage_cfg, cfg, ckpt, out_dir=stage_dir("local"))

    sc = cfg.stages.finetune_stage
    stage_cfg = StageConfig(
        stage=STAGE_FINETUNE, epochs=sc.epochs, batch_size=sc.batch_size,
        learning_rate=sc.learning_rate, views=("transaxial",), seed=seed,
        slice_step=sc.slice_step, val_slice_step=sc.val_slice_step,
        augment_enabled=sc.augment, lr_schedule=sc.lr_schedule,
        head_lr=sc.head_lr,
    )
    train_slices = finetune_bank(data, sc.slice_step, cfg.data.drop_empty,
                                 size=cfg.model.input_size)
    val_slices = val_bank(data, sc.val_slice_step, size=cfg.model.input_size)
    final = finetune(
        train_slices, stage_cfg, cfg, ckpt, val_slices=val_slices,
        out_dir=stage_dir("finetune"), allow_any_init=True,
    )

    test_vols = data.subset(data.split.test_ids)
    _, agg = evaluate_checkpoint(
        final, test_vols, run=arm.name, seed=seed,
        labeled_fraction=data.split.labeled_fraction,
    )
    return agg


def ablation_run(
    arms,
    data: PipelineData,
    cfg: Config,
    seeds,
    out_dir=None,
    log=None,
) -> list[MetricsRecord]:
    """Run the requested arms over all seeds; one record per (arm, seed)."""
    specs = []
    for name in arms:
        if name not in ARMS:
            raise ValueError(f"unknown ablation arm {name!r}; known: {list(ARM_ORDER)}")
        specs.append(ARMS[name])
    if not seeds:
        raise ValueError("at least one seed required")
    records = []
    for spec in specs:
        for seed in seeds:
            arm_dir = None
            if out_dir is not None:
                arm_dir = Path(out_dir) / spec.name.replace("+", "p") / f"seed{seed}"
            if log:
                log(f"arm {spec.name} seed {seed}")
            records.append(run_arm(spec, data, cfg, seed, out_dir=arm_dir))
            if log:
                log(f"  mean dice {records[-1].mean_dice:.4f}")
    return records


def summarize(records) -> list[dict]:
    """Mean and std of each headline metric per run tag, in first-seen order."""
    order = []
    for r in records:
        if r.run not in order:
            order.append(r.run)
    out = []
    for run in order:
        group = [r for r in records if r.run == run]
        out.append(
            {
                "run": run,
                "n_seeds": len(group),
                "mean_dice_mean": float(np.mean([r.mean_dice for r in group])),
                "mean_dice_std": float(np.std([r.mean_dice for r in group])),
                "miou_mean": float(np.mean([r.miou for r in group])),
                "miou_std": float(np.std([r.miou for r in group])),
                "pixacc_mean": float(np.mean([r.pixacc for r in group])),
                "pixacc_std": float(np.std([r.pixacc for r in group])),
            }
        )
    return out


def _append_aggregate_block(path, records) -> None:
    """Extend a records CSV with per-run mean/std rows (seed column says which)."""
    import csv as _csv

    rows = []
    for s in summarize(records):
        for kind in ("mean", "std"):
            row = {c: "" for c in CSV_COLUMNS}
            row["run"] = s["run"]
            row["seed"] = kind
            row["mean_dice"] = f"{s[f'mean_dice_{kind}']:.6f}"
            row["miou"] = f"{s[f'miou_{kind}']:.6f}"
            row["pixacc"] = f"{s[f'pixacc_{kind}']:.6f}"
            rows.append(row)
    with open(path, "a", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        for row in rows:
            writer.writerow(row)


def _bar_chart(records, metric: str, path: Path) -> None:
    summary = summarize(records)
    runs = [s["run"] for s in summary]
    means = [s[f"{metric}_mean"] for s in summary]
    stds = [s[f"{metric}_std"] for s in summary]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(runs)), means, yerr=stds, capsize=4, color="#4c72b0")
    ax.set_xticks(range(len(runs)))
    ax.set_xticklabels(runs, rotation=20, ha="right")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{metric} by run (mean over seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(records, out_dir) -> list[Path]:
    """Write records CSV (+ aggregate block), JSON mirror and bar charts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = out_dir / "records.csv"
    write_records_csv(records, csv_path)
    _append_aggregate_block(csv_path, records)
    written.append(csv_path)

    json_path = out_dir / "records.json"
    write_records_json(records, json_path)
    written.append(json_path)

    for metric in ("mean_dice", "miou", "pixacc"):
        fig_path = out_dir / f"report_{metric}.png"
        _bar_chart(records, metric, fig_path)
        written.append(fig_path)
    return written


def overlay_png(image_slice, mask_slice, path) -> Path:
    """Blend a label mask over a grayscale slice; PNG keeps slice dims."""
    img = np.asarray(image_slice, dtype=np.float32)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    rgb = np.repeat((gray * 255).astype(np.uint8)[:, :, None], 3, axis=2)
    mask = np.asarray(mask_slice).astype(np.int64) % len(PALETTE)
    color = PALETTE[mask]
    fg = (mask > 0)[:, :, None]
    blended = np.where(fg, (0.5 * rgb + 0.5 * color).astype(np.uint8), rgb)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), blended):
        raise OSError(f"could not write {path}")
    return path


def volume_overlays(volume, pred_mask, out_dir, slice_indices=None) -> list[Path]:
    """Prediction overlays for chosen transaxial slices (middle by default)."""
    depth = volume.shape[0]
    if slice_indices is None:
        slice_indices = [depth // 2]
    paths = []
    for i in slice_indices:
        p = Path(out_dir) / f"overlay_{volume.id}_slice{i:03d}.png"
        paths.append(overlay_png(volume.voxels[i], pred_mask[i], p))
    return paths
