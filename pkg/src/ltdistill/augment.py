"""Image-space augmentations on float arrays in [0, 1].

All functions take an explicit numpy Generator so callers own determinism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CropAugmentConfig:
    """Random-resized-crop family used for candidate generation."""

    area_range: tuple[float, float] = (0.3, 1.0)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5

    def validate(self) -> None:
        lo, hi = self.area_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"bad area_range {self.area_range}")
        rlo, rhi = self.aspect_range
        if not (0 < rlo <= rhi):
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"bad flip_prob {self.flip_prob}")


IDENTITY_CROP = CropAugmentConfig(area_range=(1.0, 1.0), aspect_range=(1.0, 1.0), flip_prob=0.0)


def random_flip(batch: np.ndarray, rng: np.random.Generator, prob: float = 0.5) -> np.ndarray:
    """Horizontal flip per sample with the given probability."""
    out = batch.copy()
    flips = rng.random(batch.shape[0]) < prob
    out[flips] = out[flips, :, :, ::-1]
    return out


def pad_crop(batch: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Zero-pad by `pad` on each spatial side and take a random crop back."""
    if pad == 0:
        return batch.copy()
    b, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(batch)
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    for i in range(b):
        dy, dx = offs[i]
        out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with bilinear sampling; exact identity at equal sizes."""
    c, h, w = image.shape
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(image.dtype)[None, :, None]
    wx = (xs - x0).astype(image.dtype)[None, None, :]
    top = image[:, y0][:, :, x0] * (1 - wx) + image[:, y0][:, :, x1] * wx
    bot = image[:, y1][:, :, x0] * (1 - wx) + image[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def random_resized_crop(
    image: np.ndarray, rng: np.random.Generator, cfg: CropAugmentConfig
) -> np.ndarray:
    """Crop a random area/aspect window and resize back to the input shape."""
    cfg.validate()
    c, h, w = image.shape
    crop_h, crop_w, y0, x0 = h, w, 0, 0
    for _ in range(10):
        area = rng.uniform(*cfg.area_range) * h * w
        log_r = rng.uniform(math.log(cfg.aspect_range[0]), math.log(cfg.aspect_range[1]))
        ratio = math.exp(log_r)
        ch = int(round(math.sqrt(area / ratio)))
        cw = int(round(math.sqrt(area * ratio)))
        if 1 <= ch <= h and 1 <= cw <= w:
            crop_h, crop_w = ch, cw
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            break
    crop = image[:, y0 : y0 + crop_h, x0 : x0 + crop_w]
    out = bilinear_resize(crop, h, w)
    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1].copy()
    return np.ascontiguousarray(out, dtype=np.float32)
