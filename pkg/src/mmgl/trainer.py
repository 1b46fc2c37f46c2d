"""Three-stage training orchestration with checkpoint handoff.

Stage order is part of the contract: global contrastive pre-training of
the encoder, then local supervised contrastive pre-training of the
decoder, then deeply supervised fine-tuning on labeled transaxial
slices. Fine-tuning demands a local_pretrain init unless allow_any_init
is set (the ablation arms need arbitrary inits).

Determinism: all randomness is derived from the stage seed via
derive_seed, never from global RNG state, so results do not depend on
worker count or on whether a run was resumed.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.optim import Adam

from .augment import AugmentationConfig, make_pair, augment
from .config import Config
from .data import (
    DatasetSplit,
    SLICE_SIZE,
    SliceSample,
    VIEWS,
    derive_seed,
    downsample_labels,
    load_manifest_volumes,
    slice_bank,
    split_dataset,
)
from .losses import (
    ContrastiveConfig,
    LossWeights,
    default_pairing,
    deep_supervised_loss,
    global_contrastive_level_loss,
    local_supervised_batch_loss,
    multiscale_global_loss,
    multiscale_local_loss,
)
from .metrics import mean_foreground_dice
from .model import ModelConfig, SegmentationModel

STAGE_GLOBAL = "global_pretrain"
STAGE_LOCAL = "local_pretrain"
STAGE_FINETUNE = "finetune"
STAGES = (STAGE_GLOBAL, STAGE_LOCAL, STAGE_FINETUNE)

CHECKPOINT_FORMAT_VERSION = 1
JOURNAL_NAME = "journal.csv"
LR_SCHEDULES = ("constant", "cosine")

# seed namespaces so order, augmentation and init streams never collide
_NS_INIT, _NS_ORDER, _NS_SAMPLE, _NS_POINTS = 0, 1, 2, 3


class TrainerError(Exception):
    pass


class StageOrderError(TrainerError):
    """An init checkpoint from the wrong stage was supplied."""


class CheckpointError(TrainerError):
    pass


@dataclass
class StageConfig:
    stage: str
    epochs: int
    batch_size: int
    learning_rate: float
    views: tuple[str, ...] = VIEWS
    labeled_only: bool = False
    seed: int = 0
    init_checkpoint: str | None = None
    slice_step: int = 1
    val_slice_step: int = 1
    freeze_encoder: bool = False
    augment_enabled: bool = True
    lr_schedule: str = "constant"
    head_lr: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(
                f"unknown lr_schedule {self.lr_schedule!r}, expected one of {LR_SCHEDULES}"
            )
        if self.head_lr is not None:
            if self.stage != STAGE_FINETUNE:
                raise ValueError("head_lr only applies to the finetune stage")
            if self.head_lr <= 0:
                raise ValueError(f"head_lr must be positive, got {self.head_lr}")
        self.views = tuple(self.views)
        for v in self.views:
            if v not in VIEWS:
                raise ValueError(f"unknown view {v!r}")
        if self.stage == STAGE_FINETUNE and self.views != ("transaxial",):
            raise ValueError("finetune runs on the transaxial view only")
        if self.stage in (STAGE_LOCAL, STAGE_FINETUNE):
            self.labeled_only = True


@dataclass
class TrainState:
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    optimizer_state: dict | None = None
    rng_state: torch.Tensor | None = None
    best_val_dice: float | None = None
    best_epoch: int | None = None


@dataclass
class Checkpoint:
    state_dict: dict
    model_config: ModelConfig
    stage_config: dict
    stage: str
    train_state: TrainState
    format_version: int = CHECKPOINT_FORMAT_VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "state_dict": ckpt.state_dict,
        "model_config": ckpt.model_config.to_dict(),
        "stage_config": ckpt.stage_config,
        "train_state": dataclasses.asdict(ckpt.train_state),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint archive: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} unsupported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    return Checkpoint(
        state_dict=payload["state_dict"],
        model_config=ModelConfig.from_dict(payload["model_config"]),
        stage_config=payload["stage_config"],
        stage=payload["stage"],
        train_state=TrainState(**payload["train_state"]),
    )


def make_model(model_cfg: ModelConfig, seed: int) -> SegmentationModel:
    torch.manual_seed(derive_seed(seed, _NS_INIT))
    return SegmentationModel(model_cfg)


def _model_from_init(
    model_cfg: ModelConfig,
    init: Checkpoint | None,
    expected_stage: str | None,
    seed: int,
    allow_any_init: bool,
) -> SegmentationModel:
    if init is None:
        if expected_stage is not None and not allow_any_init:
            raise StageOrderError(
                f"this stage requires an init checkpoint from {expected_stage!r} "
                "(pass allow_any_init for ablations)"
            )
        return make_model(model_cfg, seed)
    if init.model_config.to_dict() != model_cfg.to_dict():
        raise CheckpointError(
            "checkpoint model configuration does not match the requested model: "
            f"{init.model_config.to_dict()} vs {model_cfg.to_dict()}"
        )
    if expected_stage is not None and init.stage != expected_stage and not allow_any_init:
        raise StageOrderError(
            f"init checkpoint comes from stage {init.stage!r}, expected {expected_stage!r}"
        )
    model = SegmentationModel(model_cfg)
    model.load_state_dict(init.state_dict)
    return model


def _num_workers() -> int:
    raw = os.environ.get("MMGL_NUM_WORKERS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        return 0


def _map_maybe_parallel(fn, items):
    workers = _num_workers()
    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


class _Journal:
    """Append-only per-epoch CSV log with stable float formatting."""

    def __init__(self, path: Path | None, columns: list[str]):
        self.path = Path(path) if path is not None else None
        self.columns = columns
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(columns)

    def append(self, row: dict) -> None:
        if self.path is None:
            return
        formatted = [
            str(row[c]) if c == "epoch" else f"{row[c]:.8f}" for c in self.columns
        ]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(formatted)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(derive_seed(seed, _NS_ORDER, epoch)).permutation(n)


def _set_epoch_lr(opt, stage_cfg: StageConfig, epoch: int) -> None:
    """Apply the per-epoch learning rate; cosine decays from lr to ~0.

    Scales every param group from its construction-time rate, so groups
    with distinct base rates keep their ratio under the schedule.
    """
    scale = 1.0
    if stage_cfg.lr_schedule == "cosine":
        scale = 0.5 * (1.0 + math.cos(math.pi * epoch / max(stage_cfg.epochs, 1)))
    for group in opt.param_groups:
        if "initial_lr" not in group:
            group["initial_lr"] = group["lr"]
        group["lr"] = group["initial_lr"] * scale


def _stack_images(samples) -> torch.Tensor:
    arr = np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])
    return torch.from_numpy(arr)[:, None]


def _require_masks(slices, stage: str):
    for s in slices:
        if s.mask is None:
            raise TrainerError(
                f"{stage}: sample {s.volume_id}[{s.view}:{s.slice_index}] has no mask"
            )


def _finish(
    model: SegmentationModel,
    stage_cfg: StageConfig,
    state: TrainState,
    opt,
) -> Checkpoint:
    state.optimizer_state = opt.state_dict() if opt is not None else None
    state.rng_state = torch.get_rng_state()
    return Checkpoint(
        state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
        model_config=model.cfg,
        stage_config=dataclasses.asdict(stage_cfg),
        stage=stage_cfg.stage,
        train_state=state,
    )


def pretrain_global(
    slices: list[SliceSample],
    stage_cfg: StageConfig,
    cfg: Config,
    out_dir=None,
    resume_from: Checkpoint | None = None,
) -> Checkpoint:
    """Contrastive pre-training of encoder + global heads; decoder untouched.

    Each step augments a batch of slices into 2b views, embeds them at
    the three encoder head levels and minimizes the weighted NT-Xent sum.
    """
    if stage_cfg.stage != STAGE_GLOBAL:
        raise ValueError(f"expected a {STAGE_GLOBAL} config, got {stage_cfg.stage}")
    if not slices:
        raise TrainerError("empty slice bank for global pre-training")
    if stage_cfg.batch_size < 2:
        raise TrainerError("global pre-training needs batch_size >= 2 (>= 2 pairs)")

    contrastive = cfg.losses.contrastive()
    weights = cfg.losses.weights().lambda_global
    levels = cfg.model.encoder_head_levels

    if resume_from is not None:
        if resume_from.stage != STAGE_GLOBAL:
            raise StageOrderError("can only resume global pre-training from its own stage")
        model = _model_from_init(cfg.model, resume_from, None, stage_cfg.seed, True)
        state = resume_from.train_state
    else:
        model = make_model(cfg.model, stage_cfg.seed)
        state = TrainState()

    opt = Adam(model.encoder_parameters(include_heads=True), lr=stage_cfg.learning_rate)
    if resume_from is not None and state.optimizer_state is not None:
        opt.load_state_dict(state.optimizer_state)

    columns = ["epoch"] + [f"level_{e}" for e in levels] + ["total"]
    journal = _Journal(Path(out_dir) / JOURNAL_NAME if out_dir else None, columns)

    model.train()
    n = len(slices)
    for epoch in range(state.epoch, stage_cfg.epochs):
        _set_epoch_lr(opt, stage_cfg, epoch)
        order = _epoch_order(stage_cfg.seed, epoch, n)
        sums = {e: 0.0 for e in levels}
        total_sum, steps = 0.0, 0
        for start in range(0, n, stage_cfg.batch_size):
            idx = order[start : start + stage_cfg.batch_size]
            if len(idx) < 2:
                continue
            pairs = _map_maybe_parallel(
                lambda i: make_pair(
                    slices[i], cfg.augmentation, derive_seed(stage_cfg.seed, _NS_SAMPLE, epoch, int(i))
                ),
                idx,
            )
            batch = [p.a for p in pairs] + [p.b for p in pairs]
            x = _stack_images(batch)
            embeds = model.global_embeddings(x)
            pairing = default_pairing(len(batch))
            per_level = [
                global_contrastive_level_loss(embeds[e], pairing, contrastive) for e in levels
            ]
            loss = multiscale_global_loss(per_level, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for e, lv in zip(levels, per_level):
                sums[e] += float(lv.item())
            total_sum += float(loss.item())
            steps += 1
        if steps == 0:
            raise TrainerError("no usable batches; slice bank smaller than 2")
        row = {"epoch": epoch + 1, "total": total_sum / steps}
        row.update({f"level_{e}": sums[e] / steps for e in levels})
        journal.append(row)
        state.loss_history.append(row)
        state.epoch = epoch + 1
    return _finish(model, stage_cfg, state, opt)


def _local_strides(model_cfg: ModelConfig) -> dict:
    """Mask stride per decoder head level, aligned with the feature grid."""
    return {
        d: 2 ** (4 - d) * model_cfg.local_feature_stride
        for d in model_cfg.decoder_head_levels
    }


def pretrain_local(
    slices: list[SliceSample],
    stage_cfg: StageConfig,
    cfg: Config,
    init: Checkpoint | None,
    out_dir=None,
    allow_any_init: bool = False,
) -> Checkpoint:
    """Dense supervised contrastive pre-training of the decoder.

    Requires a global_pretrain init (the handoff of the staged workflow)
    unless allow_any_init. The encoder keeps receiving gradients unless
    freeze_encoder is set.
    """
    if stage_cfg.stage != STAGE_LOCAL:
        raise ValueError(f"expected a {STAGE_LOCAL} config, got {stage_cfg.stage}")
    if not slices:
        raise TrainerError("empty slice bank for local pre-training")
    _require_masks(slices, STAGE_LOCAL)

    contrastive = cfg.losses.contrastive()
    weights = cfg.losses.weights().lambda_local
    levels = cfg.model.decoder_head_levels
    strides = _local_strides(cfg.model)

    model = _model_from_init(cfg.model, init, STAGE_GLOBAL, stage_cfg.seed, allow_any_init)
    params = list(model.decoder_parameters(include_heads=True))
    if not stage_cfg.freeze_encoder:
        params += list(model.encoder_parameters(include_heads=False))
    opt = Adam(params, lr=stage_cfg.learning_rate)

    columns = ["epoch"] + [f"level_{d}" for d in levels] + ["total"]
    journal = _Journal(Path(out_dir) / JOURNAL_NAME if out_dir else None, columns)

    model.train()
    state = TrainState()
    n = len(slices)
    for epoch in range(stage_cfg.epochs):
        _set_epoch_lr(opt, stage_cfg, epoch)
        order = _epoch_order(stage_cfg.seed, epoch, n)
        sums = {d: 0.0 for d in levels}
        total_sum, steps = 0.0, 0
        for start in range(0, n, stage_cfg.batch_size):
            idx = order[start : start + stage_cfg.batch_size]
            if len(idx) < 1:
                continue
            pairs = _map_maybe_parallel(
                lambda i: make_pair(
                    slices[i], cfg.augmentation, derive_seed(stage_cfg.seed, _NS_SAMPLE, epoch, int(i))
                ),
                idx,
            )
            batch = [p.a for p in pairs] + [p.b for p in pairs]
            x = _stack_images(batch)
            feature_maps = model.local_feature_maps(x)
            per_level = []
            for d in levels:
                masks = [downsample_labels(np.asarray(s.mask), strides[d]) for s in batch]
                fmaps = list(feature_maps[d])
                per_level.append(
                    local_supervised_batch_loss(
                        fmaps,
                        masks,
                        contrastive,
                        seed=derive_seed(stage_cfg.seed, _NS_POINTS, epoch, steps, d),
                    )
                )
            loss = multiscale_local_loss(per_level, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            for d, lv in zip(levels, per_level):
                sums[d] += float(lv.item())
            total_sum += float(loss.item())
            steps += 1
        if steps == 0:
            raise TrainerError("no usable batches for local pre-training")
        row = {"epoch": epoch + 1, "total": total_sum / steps}
        row.update({f"level_{d}": sums[d] / steps for d in levels})
        journal.append(row)
        state.loss_history.append(row)
        state.epoch = epoch + 1
    return _finish(model, stage_cfg, state, opt)


def _validate(model: SegmentationModel, val_slices, batch_size: int = 16) -> float:
    """Pooled mean foreground Dice over a bank of labeled slices."""
    model.eval()
    preds, trues = [], []
    with torch.no_grad():
        for start in range(0, len(val_slices), batch_size):
            chunk = val_slices[start : start + batch_size]
            x = _stack_images(chunk)
            preds.append(model.predict_mask(x).numpy())
            trues.append(np.stack([np.asarray(s.mask) for s in chunk]))
    model.train()
    return mean_foreground_dice(np.concatenate(preds), np.concatenate(trues))


def finetune(
    slices: list[SliceSample],
    stage_cfg: StageConfig,
    cfg: Config,
    init: Checkpoint | None,
    val_slices=None,
    out_dir=None,
    allow_any_init: bool = False,
) -> Checkpoint:
    """Deeply supervised Dice training on labeled transaxial slices.

    Tracks validation mean foreground Dice per epoch when a validation
    bank is supplied and returns the best-validation parameters.
    """
    if stage_cfg.stage != STAGE_FINETUNE:
        raise ValueError(f"expected a {STAGE_FINETUNE} config, got {stage_cfg.stage}")
    if not slices:
        raise TrainerError("empty slice bank for fine-tuning")
    _require_masks(slices, STAGE_FINETUNE)
    for s in slices:
        if s.view != "transaxial":
            raise TrainerError(
                f"fine-tuning accepts transaxial slices only, got a {s.view} slice"
            )
    if val_slices:
        _require_masks(val_slices, "validation")

    weights = cfg.losses.weights().lambda_dice
    model = _model_from_init(cfg.model, init, STAGE_LOCAL, stage_cfg.seed, allow_any_init)
    if stage_cfg.head_lr is None:
        opt = Adam(model.segmentation_parameters(), lr=stage_cfg.learning_rate)
    else:
        # fresh prediction heads can take a hotter rate than the
        # pre-trained trunk without washing the trunk features out
        opt = Adam(
            [
                {"params": list(model.trunk_parameters()), "lr": stage_cfg.learning_rate},
                {"params": list(model.segmentation_head_parameters()), "lr": stage_cfg.head_lr},
            ]
        )

    aug_cfg = dataclasses.replace(cfg.augmentation, enable_noise=False, enable_gamma=False)

    columns = ["epoch", "total"] + (["val_dice"] if val_slices else [])
    journal = _Journal(Path(out_dir) / JOURNAL_NAME if out_dir else None, columns)

    model.train()
    state = TrainState()
    best_state = None
    n = len(slices)
    for epoch in range(stage_cfg.epochs):
        _set_epoch_lr(opt, stage_cfg, epoch)
        order = _epoch_order(stage_cfg.seed, epoch, n)
        total_sum, steps = 0.0, 0
        for start in range(0, n, stage_cfg.batch_size):
            idx = order[start : start + stage_cfg.batch_size]
            if stage_cfg.augment_enabled:
                batch = _map_maybe_parallel(
                    lambda i: augment(
                        slices[i], aug_cfg, derive_seed(stage_cfg.seed, _NS_SAMPLE, epoch, int(i))
                    ),
                    idx,
                )
            else:
                batch = [slices[i] for i in idx]
            x = _stack_images(batch)
            masks = torch.from_numpy(
                np.stack([np.asarray(s.mask, dtype=np.int64) for s in batch])
            )
            logits_levels = model.forward_segmentation(x)
            loss = deep_supervised_loss(logits_levels, masks, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_sum += float(loss.item())
            steps += 1
        row = {"epoch": epoch + 1, "total": total_sum / max(steps, 1)}
        if val_slices:
            val_dice = _validate(model, val_slices)
            row["val_dice"] = val_dice
            if state.best_val_dice is None or val_dice > state.best_val_dice:
                state.best_val_dice = val_dice
                state.best_epoch = epoch + 1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        journal.append(row)
        state.loss_history.append(row)
        state.epoch = epoch + 1
    if best_state is not None:
        model.load_state_dict(best_state)
    return _finish(model, stage_cfg, state, opt)


# bank construction shared by the CLI and the ablation harness


@dataclass
class PipelineData:
    volumes: list  # (Volume, LabelVolume | None) pairs
    split: DatasetSplit

    def subset(self, ids):
        wanted = set(ids)
        return [(v, l) for v, l in self.volumes if v.id in wanted]


def load_pipeline_data(cfg: Config, base_dir=None) -> PipelineData:
    if cfg.data.manifest is None:
        raise TrainerError("config.data.manifest is required to load volumes")
    manifest = Path(cfg.data.manifest)
    if not manifest.is_absolute() and base_dir is not None:
        manifest = Path(base_dir) / manifest
    volumes = load_manifest_volumes(manifest)
    ids = [v.id for v, _ in volumes]
    split = split_dataset(ids, cfg.data.labeled_fraction, cfg.data.split_seed)
    return PipelineData(volumes=volumes, split=split)


def global_bank(data: PipelineData, views, slice_step: int = 1, size: int = SLICE_SIZE):
    """Unlabeled multi-view slices from every training volume."""
    vols = [(v, None) for v, _ in data.subset(data.split.train_ids)]
    return slice_bank(vols, views, slice_step, size=size)


def local_bank(
    data: PipelineData,
    views,
    slice_step: int = 1,
    drop_empty: bool = False,
    size: int = SLICE_SIZE,
):
    """Labeled multi-view slices from the labeled training subset."""
    vols = data.subset(data.split.labeled_ids)
    for v, l in vols:
        if l is None:
            raise TrainerError(f"volume {v.id} is in the labeled subset but has no labels")
    return slice_bank(vols, views, slice_step, drop_empty=drop_empty, size=size)


def finetune_bank(
    data: PipelineData, slice_step: int = 1, drop_empty: bool = False, size: int = SLICE_SIZE
):
    """Labeled transaxial slices from the labeled training subset."""
    return local_bank(data, ("transaxial",), slice_step, drop_empty=drop_empty, size=size)


def val_bank(data: PipelineData, slice_step: int = 1, size: int = SLICE_SIZE):
    vols = data.subset(data.split.val_ids)
    for v, l in vols:
        if l is None:
            raise TrainerError(f"validation volume {v.id} has no labels")
    return slice_bank(vols, ("transaxial",), slice_step, size=size)
