"""U-Net backbone with projection and deep-supervision heads.

Geometry for a 160x160 input, base width C:

    stem   160  C
    enc1    80  2C        dec1   20  8C
    enc2    40  4C        dec2   40  4C
    enc3    20  8C        dec3   80  2C
    enc4    10  16C       dec4  160  C

Global projection heads sit on encoder levels 2..4, local projection and
segmentation heads on decoder levels 2..4. The heaviest multi-scale
weight belongs to the deepest encoder level and the finest decoder level.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

INPUT_SIZE = 160
ENCODER_HEAD_LEVELS = (2, 3, 4)
DECODER_HEAD_LEVELS = (2, 3, 4)


@dataclass
class ModelConfig:
    in_channels: int = 1
    base_channels: int = 16  # 64 at full scale
    n_classes: int = 8
    embed_dim: int = 128
    local_feature_dim: int = 64
    proj_hidden_dim: int = 256
    local_feature_stride: int = 4
    input_size: int = INPUT_SIZE
    encoder_head_levels: tuple[int, ...] = ENCODER_HEAD_LEVELS
    decoder_head_levels: tuple[int, ...] = DECODER_HEAD_LEVELS

    def __post_init__(self):
        self.encoder_head_levels = tuple(self.encoder_head_levels)
        self.decoder_head_levels = tuple(self.decoder_head_levels)
        if len(self.encoder_head_levels) != 3 or len(self.decoder_head_levels) != 3:
            raise ValueError("exactly three encoder and three decoder head levels required")
        for lv in self.encoder_head_levels + self.decoder_head_levels:
            if lv not in (1, 2, 3, 4):
                raise ValueError(f"head level {lv} outside the 4-block backbone")
        if self.input_size % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        # finest decoder head level must still be divisible by the stride
        smallest = self.input_size // 2 ** (4 - min(self.decoder_head_levels))
        if smallest % self.local_feature_stride:
            raise ValueError(
                f"stride {self.local_feature_stride} does not divide the "
                f"coarsest head feature size {smallest}"
            )
        if self.base_channels < 1 or self.n_classes < 2:
            raise ValueError("base_channels >= 1 and n_classes >= 2 required")

    def encoder_channels(self, level: int) -> int:
        # level 0 is the stem
        return self.base_channels * 2 ** level

    def decoder_channels(self, level: int) -> int:
        return self.base_channels * 2 ** (4 - level)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "n_classes": self.n_classes,
            "embed_dim": self.embed_dim,
            "local_feature_dim": self.local_feature_dim,
            "proj_hidden_dim": self.proj_hidden_dim,
            "local_feature_stride": self.local_feature_stride,
            "input_size": self.input_size,
            "encoder_head_levels": list(self.encoder_head_levels),
            "decoder_head_levels": list(self.decoder_head_levels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("encoder_head_levels", "decoder_head_levels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EncoderFeatures:
    """Per-level encoder grids; levels[e] has spatial size input/2^e."""

    stem: torch.Tensor
    levels: dict = field(default_factory=dict)  # e in 1..4


@dataclass
class DecoderFeatures:
    """Per-level decoder grids; levels[d] has spatial size input/2^(4-d)."""

    levels: dict = field(default_factory=dict)  # d in 1..4


class DoubleConv(nn.Module):
    # InstanceNorm rather than BatchNorm: training runs here use batches as
    # small as 2, where running batch statistics get noisy enough to make
    # eval-mode behaviour drift visibly from train-mode.
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class GlobalProjectionHead(nn.Module):
    """Average pool then two linear layers onto the unit sphere."""

    def __init__(self, in_ch, hidden, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(in_ch, hidden)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        v = x.mean(dim=(2, 3))
        v = self.fc2(F.relu(self.fc1(v)))
        return F.normalize(v, dim=1, eps=1e-8)


class LocalProjectionHead(nn.Module):
    """Two 1x1 convs on a stride-subsampled grid, unit norm per location."""

    def __init__(self, in_ch, hidden, out_dim, stride):
        super().__init__()
        self.stride = stride
        self.conv1 = nn.Conv2d(in_ch, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, out_dim, 1)

    def forward(self, x):
        x = x[:, :, :: self.stride, :: self.stride]
        x = self.conv2(F.relu(self.conv1(x)))
        return F.normalize(x, dim=1, eps=1e-8)


class SegmentationModel(nn.Module):
    """The shared backbone all three training stages operate on."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        c = cfg.base_channels

        self.stem = DoubleConv(cfg.in_channels, c)
        self.pool = nn.MaxPool2d(2)
        self.enc_blocks = nn.ModuleList(
            [DoubleConv(c * 2 ** (e - 1), c * 2 ** e) for e in range(1, 5)]
        )
        # dec block d fuses the upsampled coarser path with the skip at its scale
        self.dec_blocks = nn.ModuleList(
            [
                DoubleConv(c * 2 ** (5 - d) + c * 2 ** (4 - d), c * 2 ** (4 - d))
                for d in range(1, 5)
            ]
        )

        self.global_heads = nn.ModuleDict(
            {
                str(e): GlobalProjectionHead(cfg.encoder_channels(e), cfg.proj_hidden_dim, cfg.embed_dim)
                for e in cfg.encoder_head_levels
            }
        )
        self.local_heads = nn.ModuleDict(
            {
                str(d): LocalProjectionHead(
                    cfg.decoder_channels(d), cfg.proj_hidden_dim, cfg.local_feature_dim,
                    cfg.local_feature_stride,
                )
                for d in cfg.decoder_head_levels
            }
        )
        self.seg_heads = nn.ModuleDict(
            {str(d): nn.Conv2d(cfg.decoder_channels(d), cfg.n_classes, 1) for d in cfg.decoder_head_levels}
        )

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 2:
            x = x[None, None]
        elif x.dim() == 3:
            x = x[:, None]
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (b, {self.cfg.in_channels}, h, w) input, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.input_size or x.shape[3] != self.cfg.input_size:
            raise ValueError(
                f"expected {self.cfg.input_size}x{self.cfg.input_size} slices, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        return x

    def encode(self, x: torch.Tensor) -> EncoderFeatures:
        x = self._check_input(x)
        stem = self.stem(x)
        levels = {}
        h = stem
        for e, block in enumerate(self.enc_blocks, start=1):
            h = block(self.pool(h))
            levels[e] = h
        return EncoderFeatures(stem=stem, levels=levels)

    def decode(self, feats: EncoderFeatures) -> DecoderFeatures:
        skips = {1: feats.levels[3], 2: feats.levels[2], 3: feats.levels[1], 4: feats.stem}
        h = feats.levels[4]
        levels = {}
        for d, block in enumerate(self.dec_blocks, start=1):
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skips[d]], dim=1))
            levels[d] = h
        return DecoderFeatures(levels=levels)

    def _head(self, heads: nn.ModuleDict, level: int, kind: str) -> nn.Module:
        key = str(level)
        if key not in heads:
            raise ValueError(f"no {kind} head at level {level}; heads exist at {sorted(heads)}")
        return heads[key]

    def global_project(self, feats: EncoderFeatures, level: int) -> torch.Tensor:
        return self._head(self.global_heads, level, "global")(feats.levels[level])

    def local_project(self, feats: DecoderFeatures, level: int) -> torch.Tensor:
        return self._head(self.local_heads, level, "local")(feats.levels[level])

    def global_embeddings(self, x: torch.Tensor) -> dict:
        feats = self.encode(x)
        return {e: self.global_project(feats, e) for e in self.cfg.encoder_head_levels}

    def local_feature_maps(self, x: torch.Tensor) -> dict:
        dec = self.decode(self.encode(x))
        return {d: self.local_project(dec, d) for d in self.cfg.decoder_head_levels}

    def forward_segmentation(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-level class logits, each upsampled to the input resolution.

        Ordered coarse to fine; the last entry is the main prediction.
        """
        dec = self.decode(self.encode(x))
        size = (self.cfg.input_size, self.cfg.input_size)
        out = []
        for d in self.cfg.decoder_head_levels:
            logits = self._head(self.seg_heads, d, "segmentation")(dec.levels[d])
            if logits.shape[-2:] != size:
                logits = F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
            out.append(logits)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_segmentation(x)[-1]

    def predict_mask(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(x).argmax(dim=1)

    # parameter groups for the stage optimizers

    def encoder_parameters(self, include_heads: bool = True):
        mods = [self.stem, self.enc_blocks] + ([self.global_heads] if include_heads else [])
        for m in mods:
            yield from m.parameters()

    def decoder_parameters(self, include_heads: bool = True):
        mods = [self.dec_blocks] + ([self.local_heads] if include_heads else [])
        for m in mods:
            yield from m.parameters()

    def segmentation_parameters(self):
        for m in (self.stem, self.enc_blocks, self.dec_blocks, self.seg_heads):
            yield from m.parameters()

    def trunk_parameters(self):
        """Segmentation parameters minus the prediction heads."""
        for m in (self.stem, self.enc_blocks, self.dec_blocks):
            yield from m.parameters()

    def segmentation_head_parameters(self):
        yield from self.seg_heads.parameters()
