"""Command-line entry point for the full pipeline.

Every subcommand writes into a fresh run directory (reuse requires
--force), drops the exact resolved configuration next to its outputs and
finishes with a run_manifest.json listing every file it produced.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from .config import (
    Config,
    ConfigError,
    apply_dice_weights,
    load_config,
    parse_views,
    resolved_dict,
    save_resolved,
)
from .data import DataError
from .losses import DENOMINATOR_MODES
from .nifti import NiftiError
from .phantom import PhantomError, write_phantom_dataset
from .report import (
    ARM_ORDER,
    ablation_run,
    emit_report,
    evaluate_checkpoint,
    volume_overlays,
)
from .metrics import predict_volume, write_records_csv, write_records_json
from .model import SegmentationModel
from .trainer import (
    STAGE_FINETUNE,
    STAGE_GLOBAL,
    STAGE_LOCAL,
    StageConfig,
    TrainerError,
    finetune,
    finetune_bank,
    global_bank,
    load_checkpoint,
    load_pipeline_data,
    local_bank,
    pretrain_global,
    pretrain_local,
    save_checkpoint,
    val_bank,
)

CHECKPOINT_NAME = "checkpoint.pt"


def _friendly(fn):
    """Map internal errors onto clean nonzero-exit CLI messages."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (
            ConfigError,
            DataError,
            NiftiError,
            PhantomError,
            TrainerError,
            FileNotFoundError,
            ValueError,
        ) as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise click.ClickException(
            f"run directory {out_dir} already has contents; pass --force to reuse it"
        )
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_run_manifest(out_dir: Path, config_path, resolved) -> None:
    files = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    )
    payload = {
        "command": " ".join(sys.argv),
        "config_path": str(config_path) if config_path else None,
        "resolved_config": resolved,
        "outputs": files + ["run_manifest.json"],
        "created": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_cfg(
    config_path,
    labeled_fraction=None,
    views=None,
    global_loss_mode=None,
    dice_weights=None,
) -> Config:
    cfg = load_config(config_path) if config_path else Config()
    if labeled_fraction is not None:
        cfg.data = dataclasses.replace(cfg.data, labeled_fraction=labeled_fraction)
    if views is not None:
        cfg.data = dataclasses.replace(cfg.data, views=parse_views(views))
    if global_loss_mode is not None:
        cfg.losses = dataclasses.replace(cfg.losses, denominator_mode=global_loss_mode)
    if dice_weights is not None:
        apply_dice_weights(cfg, dice_weights)
    return cfg


def _pipeline_data(cfg: Config, config_path):
    base = Path(config_path).parent if config_path else Path.cwd()
    return load_pipeline_data(cfg, base_dir=base)


def _common_outputs(out_dir: Path, cfg: Config, config_path, data=None) -> None:
    save_resolved(cfg, out_dir / "resolved_config.json")
    if data is not None:
        data.split.save(out_dir / "split.json")
    _write_run_manifest(out_dir, config_path, resolved_dict(cfg))


@click.group()
def main():
    """Multi-scale multi-view contrastive pre-training for segmentation."""


@main.command("synth-data")
@click.option("--count", default=10, show_default=True, help="Number of volumes.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, help="Output directory.")
@click.option("--shape", default="64,64,64", show_default=True, help="Volume dims d,h,w.")
@click.option("--structures", default=7, show_default=True, help="Foreground classes.")
@click.option("--noise-sigma", default=0.05, show_default=True)
@click.option("--force", is_flag=True, help="Write into a non-empty directory.")
@_friendly
def synth_data(count, seed, out, shape, structures, noise_sigma, force):
    """Generate labeled phantom volumes plus their manifest."""
    out_dir = _prepare_out(out, force)
    dims = tuple(int(s) for s in shape.split(","))
    manifest = write_phantom_dataset(
        out_dir, count=count, seed=seed, shape=dims,
        n_structures=structures, noise_sigma=noise_sigma,
    )
    params = {
        "count": count, "seed": seed, "shape": list(dims),
        "structures": structures, "noise_sigma": noise_sigma,
    }
    _write_run_manifest(out_dir, None, params)
    click.echo(f"wrote {count} volumes and {manifest.name} to {out_dir}")


@main.command("pretrain-global")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--views", default=None, help="Comma list, e.g. t,c,s.")
@click.option("--labeled-fraction", type=float, default=None)
@click.option(
    "--global-loss-mode", type=click.Choice(DENOMINATOR_MODES), default=None,
    help="NT-Xent denominator convention.",
)
@click.option("--force", is_flag=True)
@_friendly
def cmd_pretrain_global(config_path, out, seed, views, labeled_fraction, global_loss_mode, force):
    """Stage 1: contrastive pre-training of the encoder on all views."""
    out_dir = _prepare_out(out, force)
    cfg = _load_cfg(config_path, labeled_fraction, views, global_loss_mode)
    data = _pipeline_data(cfg, config_path)
    sc = cfg.stages.global_stage
    stage_cfg = StageConfig(
        stage=STAGE_GLOBAL, epochs=sc.epochs, batch_size=sc.batch_size,
        learning_rate=sc.learning_rate, views=cfg.data.views, seed=seed,
        slice_step=sc.slice_step, lr_schedule=sc.lr_schedule,
    )
    bank = global_bank(data, cfg.data.views, sc.slice_step, size=cfg.model.input_size)
    ckpt = pretrain_global(bank, stage_cfg, cfg, out_dir=out_dir)
    save_checkpoint(ckpt, out_dir / CHECKPOINT_NAME)
    _common_outputs(out_dir, cfg, config_path, data)
    click.echo(f"global pre-training done; checkpoint at {out_dir / CHECKPOINT_NAME}")


@main.command("pretrain-local")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--views", default=None)
@click.option("--labeled-fraction", type=float, default=None)
@click.option("--init", "init_path", type=click.Path(exists=True), required=False,
              help="Stage-1 checkpoint.")
@click.option("--allow-any-init", is_flag=True, help="Skip the stage-order check.")
@click.option("--freeze-encoder", is_flag=True)
@click.option("--force", is_flag=True)
@_friendly
def cmd_pretrain_local(config_path, out, seed, views, labeled_fraction, init_path,
                       allow_any_init, freeze_encoder, force):
    """Stage 2: supervised dense contrastive pre-training of the decoder."""
    out_dir = _prepare_out(out, force)
    cfg = _load_cfg(config_path, labeled_fraction, views)
    data = _pipeline_data(cfg, config_path)
    init = load_checkpoint(init_path) if init_path else None
    sc = cfg.stages.local_stage
    stage_cfg = StageConfig(
        stage=STAGE_LOCAL, epochs=sc.epochs, batch_size=sc.batch_size,
        learning_rate=sc.learning_rate, views=cfg.data.views, seed=seed,
        init_checkpoint=init_path, slice_step=sc.slice_step,
        freeze_encoder=freeze_encoder or sc.freeze_encoder,
        lr_schedule=sc.lr_schedule,
    )
    bank = local_bank(data, cfg.data.views, sc.slice_step, cfg.data.drop_empty,
                      size=cfg.model.input_size)
    ckpt = pretrain_local(bank, stage_cfg, cfg, init, out_dir=out_dir,
                          allow_any_init=allow_any_init)
    save_checkpoint(ckpt, out_dir / CHECKPOINT_NAME)
    _common_outputs(out_dir, cfg, config_path, data)
    click.echo(f"local pre-training done; checkpoint at {out_dir / CHECKPOINT_NAME}")


@main.command("finetune")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--labeled-fraction", type=float, default=None)
@click.option("--dice-weights", default=None, help="Deep-supervision portfolio a:b:c.")
@click.option("--init", "init_path", type=click.Path(exists=True), required=False,
              help="Stage-2 checkpoint.")
@click.option("--allow-any-init", is_flag=True,
              help="Accept any (or no) init; needed for ablation arms.")
@click.option("--force", is_flag=True)
@_friendly
def cmd_finetune(config_path, out, seed, labeled_fraction, dice_weights, init_path,
                 allow_any_init, force):
    """Stage 3: deeply supervised Dice training on transaxial slices."""
    out_dir = _prepare_out(out, force)
    cfg = _load_cfg(config_path, labeled_fraction, dice_weights=dice_weights)
    data = _pipeline_data(cfg, config_path)
    init = load_checkpoint(init_path) if init_path else None
    sc = cfg.stages.finetune_stage
    stage_cfg = StageConfig(
        stage=STAGE_FINETUNE, epochs=sc.epochs, batch_size=sc.batch_size,
        learning_rate=sc.learning_rate, views=("transaxial",), seed=seed,
        init_checkpoint=init_path, slice_step=sc.slice_step,
        val_slice_step=sc.val_slice_step, augment_enabled=sc.augment,
        lr_schedule=sc.lr_schedule, head_lr=sc.head_lr,
    )
    bank = finetune_bank(data, sc.slice_step, cfg.data.drop_empty,
                         size=cfg.model.input_size)
    vbank = val_bank(data, sc.val_slice_step, size=cfg.model.input_size)
    ckpt = finetune(bank, stage_cfg, cfg, init, val_slices=vbank,
                    out_dir=out_dir, allow_any_init=allow_any_init)
    save_checkpoint(ckpt, out_dir / CHECKPOINT_NAME)
    _common_outputs(out_dir, cfg, config_path, data)
    best = ckpt.train_state.best_val_dice
    if best is not None:
        click.echo(f"fine-tuning done; best val dice {best:.4f}")
    else:
        click.echo("fine-tuning done")


@main.command("evaluate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--checkpoint", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--out", required=True)
@click.option("--split", type=click.Choice(["test", "val", "train"]), default="test",
              show_default=True)
@click.option("--labeled-fraction", type=float, default=None)
@click.option("--overlays/--no-overlays", default=True, show_default=True)
@click.option("--force", is_flag=True)
@_friendly
def cmd_evaluate(config_path, ckpt_path, out, split, labeled_fraction, overlays, force):
    """Score a checkpoint on a data split, volume by volume."""
    out_dir = _prepare_out(out, force)
    cfg = _load_cfg(config_path, labeled_fraction)
    data = _pipeline_data(cfg, config_path)
    ckpt = load_checkpoint(ckpt_path)
    ids = {
        "test": data.split.test_ids,
        "val": data.split.val_ids,
        "train": data.split.train_ids,
    }[split]
    vols = data.subset(ids)
    seed = int(ckpt.stage_config.get("seed", 0))
    records, agg = evaluate_checkpoint(
        ckpt, vols, run=f"evaluate-{split}", seed=seed,
        labeled_fraction=cfg.data.labeled_fraction,
    )
    write_records_csv(records + [agg], out_dir / "records.csv")
    write_records_json(records + [agg], out_dir / "records.json")
    if overlays:
        model = SegmentationModel(ckpt.model_config)
        model.load_state_dict(ckpt.state_dict)
        model.eval()
        for v, _ in vols:
            volume_overlays(v, predict_volume(model, v), out_dir)
    _common_outputs(out_dir, cfg, config_path, data)
    click.echo(f"mean dice {agg.mean_dice:.4f}  miou {agg.miou:.4f}  pixacc {agg.pixacc:.4f}")


@main.command("ablate")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True)
@click.option("--seeds", default="0,1", show_default=True, help="Comma list of seeds.")
@click.option("--arms", default=",".join(ARM_ORDER), show_default=True)
@click.option("--labeled-fraction", type=float, default=None)
@click.option("--global-loss-mode", type=click.Choice(DENOMINATOR_MODES), default=None)
@click.option("--dice-weights", default=None)
@click.option("--force", is_flag=True)
@_friendly
def cmd_ablate(config_path, out, seeds, arms, labeled_fraction, global_loss_mode,
               dice_weights, force):
    """Run the component-ablation ladder and emit the summary report."""
    out_dir = _prepare_out(out, force)
    cfg = _load_cfg(config_path, labeled_fraction, None, global_loss_mode, dice_weights)
    data = _pipeline_data(cfg, config_path)
    seed_list = [int(s) for s in seeds.split(",") if s.strip() != ""]
    arm_list = [a.strip() for a in arms.split(",") if a.strip()]
    records = ablation_run(
        arm_list, data, cfg, seed_list, out_dir=out_dir / "arms", log=click.echo,
    )
    emit_report(records, out_dir)
    _common_outputs(out_dir, cfg, config_path, data)
    click.echo(f"ablation report in {out_dir}")


@main.command("report")
@click.option("--records", "records_path", type=click.Path(exists=True), required=True,
              help="records.csv or records.json from evaluate/ablate.")
@click.option("--out", required=True)
@click.option("--force", is_flag=True)
@_friendly
def cmd_report(records_path, out, force):
    """Re-render tables and figures from stored records."""
    from .metrics import read_records_csv, read_records_json

    out_dir = _prepare_out(out, force)
    path = Path(records_path)
    records = read_records_json(path) if path.suffix == ".json" else read_records_csv(path)
    if not records:
        raise click.ClickException(f"no records found in {path}")
    emit_report(records, out_dir)
    _write_run_manifest(out_dir, None, {"records": str(path)})
    click.echo(f"report written to {out_dir}")


if __name__ == "__main__":
    main()
