import time, tempfile, dataclasses
from pathlib import Path

from mmgl.config import Config
from mmgl.model import SegmentationModel
from mmgl.metrics import evaluate_volume, aggregate_records
from mmgl.phantom import write_phantom_dataset
from mmgl.trainer import (
    StageConfig, STAGE_GLOBAL, STAGE_LOCAL, STAGE_FINETUNE,
    pretrain_global, pretrain_local, finetune, load_pipeline_data,
    global_bank, local_bank, finetune_bank, val_bank,
)

t0 = time.time()
root = Path(tempfile.mkdtemp(prefix="calib_"))
write_phantom_dataset(root, count=10, seed=11, shape=(64, 64, 64), n_structures=7, noise_sigma=0.05)

cfg = Config()
cfg.data = dataclasses.replace(cfg.data, manifest=str(root / "manifest.json"), labeled_fraction=0.2)
data = load_pipeline_data(cfg)
seed = 0

gbank = global_bank(data, cfg.data.views, 8)
lbank = local_bank(data, cfg.data.views, 6)
fbank = finetune_bank(data, 1)
vbank = val_bank(data, 8)
print(f"banks g/l/f/v: {len(gbank)} {len(lbank)} {len(fbank)} {len(vbank)}", flush=True)

t = time.time()
gcfg = StageConfig(stage=STAGE_GLOBAL, epochs=5, batch_size=8, learning_rate=1e-3, views=cfg.data.views, seed=seed)
gck = pretrain_global(gbank, gcfg, cfg)
print(f"global {time.time()-t:.0f}s loss {gck.train_state.loss_history[0]['total']:.3f}->{gck.train_state.loss_history[-1]['total']:.3f}", flush=True)
t = time.time()
lcfg = StageConfig(stage=STAGE_LOCAL, epochs=5, batch_size=4, learning_rate=1e-3, views=cfg.data.views, seed=seed)
lck = pretrain_local(lbank, lcfg, cfg, gck)
print(f"local {time.time()-t:.0f}s loss {lck.train_state.loss_history[0]['total']:.3f}->{lck.train_state.loss_history[-1]['total']:.3f}", flush=True)


def vol_eval(ck, tag):
    model = SegmentationModel(ck.model_config)
    model.load_state_dict(ck.state_dict)
    recs = [evaluate_volume(model, v, l, run=tag) for v, l in data.subset(data.split.val_ids)]
    agg = aggregate_records(recs, run=tag, seed=0, labeled_fraction=0.2)
    print(f"  {tag} volume-level mean fg dice: {agg.mean_dice:.4f} (per-vol {[round(r.mean_dice,4) for r in recs]})", flush=True)
    return agg.mean_dice


t = time.time()
fcfg = StageConfig(stage=STAGE_FINETUNE, epochs=20, batch_size=1, learning_rate=3e-3,
                   views=("transaxial",), seed=seed, augment_enabled=False)
fck = finetune(fbank, fcfg, cfg, lck, val_slices=vbank)
h = fck.train_state.loss_history
print(f"mmgl-dense {time.time()-t:.0f}s loss {h[0]['total']:.3f}->{h[-1]['total']:.3f}", flush=True)
print("  val:", [round(r['val_dice'], 3) for r in h], flush=True)
print(f"  best: {fck.train_state.best_val_dice:.4f} @ep{fck.train_state.best_epoch}", flush=True)
vol_eval(fck, "mmgl-dense")
print(f"TOTAL {(time.time()-t0)/60:.1f} min", flush=True)
