"""Semi-supervised segmentation pre-training: multi-scale global and
local contrastive stages over a U-Net, followed by deeply supervised
fine-tuning on a labeled fraction of transaxial slices."""

__version__ = "0.1.0"

from .augment import AugmentationConfig, AugmentedPair, augment, make_pair
from .data import (
    DatasetSplit,
    LabelVolume,
    SliceSample,
    VIEWS,
    Volume,
    derive_seed,
    downsample_labels,
    load_volume,
    normalize_minmax,
    resize_slice,
    slice_volume,
    split_dataset,
)
from .losses import (
    ContrastiveConfig,
    DegenerateBatchWarning,
    LossWeights,
    cosine_sim,
    deep_supervised_loss,
    dice_loss,
    global_contrastive_level_loss,
    local_supervised_batch_loss,
    local_supervised_level_loss,
    multiscale_global_loss,
    multiscale_local_loss,
    normalize_portfolio,
)
from .metrics import (
    MetricsRecord,
    dice_score,
    evaluate_volume,
    mean_foreground_dice,
    miou,
    pixel_accuracy,
)
from .model import ModelConfig, SegmentationModel
from .nifti import NiftiError, read_nifti, write_nifti
from .phantom import PhantomConfig, generate_phantom, write_phantom_dataset
from .trainer import (
    Checkpoint,
    StageConfig,
    StageOrderError,
    finetune,
    load_checkpoint,
    pretrain_global,
    pretrain_local,
    save_checkpoint,
)
