import time, tempfile, dataclasses
from pathlib import Path
import numpy as np

from mmgl.config import Config, GlobalStageConfig, LocalStageConfig, FinetuneStageConfig
from mmgl.phantom import write_phantom_dataset
from mmgl.trainer import (
    PipelineData, StageConfig, STAGE_GLOBAL, STAGE_LOCAL, STAGE_FINETUNE,
    pretrain_global, pretrain_local, finetune, load_pipeline_data,
    global_bank, local_bank, finetune_bank, val_bank,
)

t0 = time.time()
root = Path(tempfile.mkdtemp(prefix="calib_"))
write_phantom_dataset(root, count=10, seed=11, shape=(64, 64, 64), n_structures=7, noise_sigma=0.05)
print(f"dataset: {time.time()-t0:.1f}s")

cfg = Config()
cfg.data = dataclasses.replace(cfg.data, manifest=str(root / "manifest.json"), labeled_fraction=0.2)
data = load_pipeline_data(cfg)
print("split:", data.split.train_ids, "|labeled", data.split.labeled_ids, "| val", data.split.val_ids)

G_STEP, L_STEP, F_STEP, V_STEP = 16, 12, 2, 8
seed = 0

t = time.time()
gbank = global_bank(data, cfg.data.views, G_STEP)
print(f"global bank {len(gbank)} slices ({time.time()-t:.1f}s)")
t = time.time()
gcfg = StageConfig(stage=STAGE_GLOBAL, epochs=5, batch_size=8, learning_rate=1e-3, views=cfg.data.views, seed=seed)
gck = pretrain_global(gbank, gcfg, cfg)
print(f"global 5ep: {time.time()-t:.1f}s  losses {[round(r['total'],4) for r in gck.train_state.loss_history]}")

t = time.time()
lbank = local_bank(data, cfg.data.views, L_STEP)
lcfg = StageConfig(stage=STAGE_LOCAL, epochs=5, batch_size=4, learning_rate=1e-3, views=cfg.data.views, seed=seed)
lck = pretrain_local(lbank, lcfg, cfg, gck)
print(f"local bank {len(lbank)}; 5ep: {time.time()-t:.1f}s  losses {[round(r['total'],4) for r in lck.train_state.loss_history]}")

t = time.time()
fbank = finetune_bank(data, F_STEP)
vbank = val_bank(data, V_STEP)
fcfg = StageConfig(stage=STAGE_FINETUNE, epochs=20, batch_size=8, learning_rate=1e-4, views=("transaxial",), seed=seed)
fck = finetune(fbank, fcfg, cfg, lck, val_slices=vbank)
h = fck.train_state.loss_history
print(f"finetune bank {len(fbank)} val {len(vbank)}; 20ep lr1e-4: {time.time()-t:.1f}s")
print("  loss:", [round(r['total'],4) for r in h])
print("  val :", [round(r['val_dice'],4) for r in h])
print("  best:", fck.train_state.best_val_dice)

t = time.time()
rcfg_full = dataclasses.replace(cfg, losses=dataclasses.replace(cfg.losses, lambda_dice=(0.0, 0.0, 1.0)))
rck = finetune(fbank, fcfg, rcfg_full, None, val_slices=vbank, allow_any_init=True)
print(f"random arm 20ep: {time.time()-t:.1f}s best {rck.train_state.best_val_dice:.4f}")
print(f"TOTAL {time.time()-t0:.1f}s")
