"""Stochastic slice augmentation for contrastive pairs and fine-tuning.

The spatial part (rotation + crop-and-resize) is composed into a single
inverse affine map applied once per array. Image and mask go through the
exact same map, differing only in interpolation (bilinear vs nearest), so
a pixel's label always travels with its intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import cv2
import numpy as np

from .data import SliceSample, derive_seed


@dataclass
class AugmentationConfig:
    brightness_range: tuple[float, float] = (0.7, 1.3)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    noise_sigma_max: float = 0.1
    rotation_max_deg: float = 20.0
    crop_scale_range: tuple[float, float] = (0.8, 1.0)
    enable_rotation: bool = True
    enable_crop: bool = True
    enable_brightness: bool = True
    enable_gamma: bool = True
    enable_noise: bool = True

    def __post_init__(self):
        for name in ("brightness_range", "gamma_range", "crop_scale_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: empty interval ({lo}, {hi})")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale_range must sit inside (0, 1], got ({lo}, {hi})")
        if self.noise_sigma_max < 0:
            raise ValueError(f"noise_sigma_max must be >= 0, got {self.noise_sigma_max}")
        if self.rotation_max_deg < 0:
            raise ValueError(f"rotation_max_deg must be >= 0, got {self.rotation_max_deg}")

    @classmethod
    def finetune_default(cls) -> "AugmentationConfig":
        # weaker pipeline for supervised fine-tuning: no noise, no gamma
        return cls(enable_noise=False, enable_gamma=False)

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(
            enable_rotation=False,
            enable_crop=False,
            enable_brightness=False,
            enable_gamma=False,
            enable_noise=False,
        )

    @property
    def any_spatial(self) -> bool:
        return self.enable_rotation or self.enable_crop

    @property
    def any_enabled(self) -> bool:
        return (
            self.any_spatial
            or self.enable_brightness
            or self.enable_gamma
            or self.enable_noise
        )


@dataclass
class AugmentedPair:
    """Two independently augmented renditions of the same source slice."""

    a: SliceSample
    b: SliceSample

    def __post_init__(self):
        if self.source_of(self.a) != self.source_of(self.b):
            raise ValueError("pair members must come from the same source slice")

    @staticmethod
    def source_of(s: SliceSample):
        return (s.volume_id, s.view, s.slice_index)

    @property
    def source(self):
        return self.source_of(self.a)


def inverse_spatial_map(shape, angle_deg: float, crop_scale: float, u_top: float, u_left: float):
    """Destination-to-source affine for rotate-then-crop-and-resize.

    The crop window has fractional size crop_scale * (h, w), placed by the
    unit offsets (u_top, u_left) within the slack left after cropping.
    Returned as the 2x3 matrix cv2.warpAffine expects with WARP_INVERSE_MAP.
    """
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    a, b = np.cos(theta), np.sin(theta)
    s = crop_scale
    left = u_left * (w - s * w)
    top = u_top * (h - s * h)
    # resize convention: dst pixel x samples src at s*x + 0.5*s - 0.5 + left
    tx = 0.5 * s - 0.5 + left
    ty = 0.5 * s - 0.5 + top
    return np.array(
        [
            [a * s, b * s, a * (tx - cx) + b * (ty - cy) + cx],
            [-b * s, a * s, -b * (tx - cx) + a * (ty - cy) + cy],
        ],
        dtype=np.float64,
    )


def _warp(arr: np.ndarray, m: np.ndarray, nearest: bool) -> np.ndarray:
    h, w = arr.shape
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(
        arr,
        m,
        (w, h),
        flags=interp | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REFLECT_101,
    )


def augment(s: SliceSample, cfg: AugmentationConfig, seed: int) -> SliceSample:
    """Apply one random draw of the pipeline; deterministic given seed.

    Order: rotation, crop-and-resize, brightness, gamma, noise, clamp to
    [0, 1]. The mask sees only the spatial part. All random parameters
    are drawn up front in a fixed order, so toggling one transform off
    does not reshuffle the others' draws.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)
    crop_scale = rng.uniform(*cfg.crop_scale_range)
    u_top, u_left = rng.uniform(size=2)
    brightness = rng.uniform(*cfg.brightness_range)
    gamma = rng.uniform(*cfg.gamma_range)
    sigma = rng.uniform(0.0, cfg.noise_sigma_max)

    if not cfg.any_enabled:
        return replace(s, image=np.asarray(s.image).copy(),
                       mask=None if s.mask is None else s.mask.copy())

    img = np.asarray(s.image, dtype=np.float32)
    mask = s.mask
    if cfg.any_spatial:
        if not cfg.enable_rotation:
            angle = 0.0
        if not cfg.enable_crop:
            crop_scale, u_top, u_left = 1.0, 0.0, 0.0
        m = inverse_spatial_map(img.shape, angle, crop_scale, u_top, u_left)
        img = _warp(img, m, nearest=False)
        if mask is not None:
            mask = _warp(mask.astype(np.int16), m, nearest=True).astype(s.mask.dtype)
    else:
        img = img.copy()
        mask = None if mask is None else mask.copy()

    if cfg.enable_brightness:
        img = img * brightness
    if cfg.enable_gamma:
        img = np.power(np.clip(img, 0.0, None), gamma)
    if cfg.enable_noise:
        img = img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return replace(s, image=img, mask=mask)


def make_pair(s: SliceSample, cfg: AugmentationConfig, seed: int) -> AugmentedPair:
    """Two independent augmentations of one slice, seeds derived from one."""
    return AugmentedPair(
        a=augment(s, cfg, derive_seed(seed, 0)),
        b=augment(s, cfg, derive_seed(seed, 1)),
    )
