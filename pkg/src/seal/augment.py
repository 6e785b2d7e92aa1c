"""Stochastic image augmentation for Stage II.

Images are float arrays ``[H, W, 3]`` in ``[0, 1]``.  Randomness comes only
from the ``numpy.random.Generator`` passed in.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError


@dataclass
class AugmentConfig:
    crop_p: float = 1.0
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_p: float = 0.5
    vflip_p: float = 0.25
    # one-of group: at most one member fires, chosen with weight = member p
    color_group_p: float = 1.0
    brightness_contrast_p: float = 1.0
    brightness: float = 0.1
    contrast: float = 0.1
    grayscale_p: float = 0.2
    channel_shuffle_p: float = 0.5
    blur_p: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    def __post_init__(self):
        self.crop_scale = tuple(self.crop_scale)
        self.crop_ratio = tuple(self.crop_ratio)
        self.blur_sigma = tuple(self.blur_sigma)
        for name in ("crop_p", "hflip_p", "vflip_p", "color_group_p", "brightness_contrast_p",
                     "grayscale_p", "channel_shuffle_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigError("crop_scale must satisfy 0 < lo <= hi <= 1")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop_p=0, hflip_p=0, vflip_p=0, color_group_p=0, brightness_contrast_p=0,
                   grayscale_p=0, channel_shuffle_p=0, blur_p=0)


def resized_crop(img: np.ndarray, top: float, left: float, h: float, w: float) -> np.ndarray:
    """Bilinear resample of the box ``(top, left, h, w)`` back to full size."""
    H, W = img.shape[:2]
    ys = top + (np.arange(H) + 0.5) * h / H - 0.5
    xs = left + (np.arange(W) + 0.5) * w / W - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], [yy, xx], order=1, mode="nearest")
    return out


def _random_crop_box(shape, cfg: AugmentConfig, rng: np.random.Generator):
    H, W = shape[:2]
    area = H * W * rng.uniform(*cfg.crop_scale)
    log_r = rng.uniform(math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    ratio = math.exp(log_r)
    w = min(W, math.sqrt(area * ratio))
    h = min(H, math.sqrt(area / ratio))
    top = rng.uniform(0, H - h)
    left = rng.uniform(0, W - w)
    return top, left, h, w


def _brightness_contrast(img, cfg, rng):
    alpha = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
    beta = rng.uniform(-cfg.brightness, cfg.brightness)
    return np.clip(img * alpha + beta, 0.0, 1.0)


def _grayscale(img, cfg, rng):
    lum = img @ np.array([0.299, 0.587, 0.114])
    return np.repeat(lum[..., None], 3, axis=2)


def _channel_shuffle(img, cfg, rng):
    return img[..., rng.permutation(3)]


_COLOR_GROUP = (
    ("brightness_contrast_p", _brightness_contrast),
    ("grayscale_p", _grayscale),
    ("channel_shuffle_p", _channel_shuffle),
)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] image, got {img.shape}")
    out = img
    if rng.random() < cfg.crop_p:
        out = resized_crop(out, *_random_crop_box(out.shape, cfg, rng))
    if rng.random() < cfg.hflip_p:
        out = out[:, ::-1]
    if rng.random() < cfg.vflip_p:
        out = out[::-1, :]
    weights = np.array([getattr(cfg, name) for name, _ in _COLOR_GROUP])
    if weights.sum() > 0 and rng.random() < cfg.color_group_p:
        k = rng.choice(len(_COLOR_GROUP), p=weights / weights.sum())
        out = _COLOR_GROUP[k][1](out, cfg, rng)
    if rng.random() < cfg.blur_p:
        sigma = rng.uniform(*cfg.blur_sigma)
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
    return np.ascontiguousarray(out)
