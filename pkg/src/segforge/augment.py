"""Paired image/mask augmentation.

Order: random resized crop, vertical flip, horizontal flip, rotation,
brightness/contrast, normalisation.  Geometric steps move the mask with the
image using nearest-neighbour sampling; photometric steps and normalisation
never touch it.  All randomness comes from one generator seeded by
:func:`derive_seed`, so an augmented sample is a pure function of
``(sample, epoch, cfg)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from .data import ImageSample

_MASK64 = (1 << 64) - 1


class AugmentConfigError(ValueError):
    pass


@dataclass
class AugmentConfig:
    crop_area_range: List[float] = field(default_factory=lambda: [0.06, 0.28])
    crop_aspect_range: List[float] = field(default_factory=lambda: [3 / 4, 4 / 3])
    output_size: int = 64
    flip_prob: float = 0.5
    rotation_range: List[float] = field(default_factory=lambda: [0.0, 360.0])
    photometric_prob: float = 0.5
    brightness_delta_max: float = 0.2
    contrast_factor_range: List[float] = field(default_factory=lambda: [0.8, 1.2])
    normalize_mean: List[float] = field(default_factory=lambda: [0.485, 0.456, 0.406])
    normalize_std: List[float] = field(default_factory=lambda: [0.229, 0.224, 0.225])
    master_seed: int = 0

    def validate(self) -> None:
        lo, hi = self.crop_area_range
        if not 0 < lo <= hi <= 1:
            raise AugmentConfigError("crop_area_range must satisfy 0 < min <= max <= 1")
        alo, ahi = self.crop_aspect_range
        if not 0 < alo <= ahi:
            raise AugmentConfigError("crop_aspect_range must satisfy 0 < min <= max")
        if self.output_size < 8:
            raise AugmentConfigError("output_size must be >= 8")
        for name in ("flip_prob", "photometric_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise AugmentConfigError(f"{name} must be in [0, 1]")
        if self.brightness_delta_max < 0:
            raise AugmentConfigError("brightness_delta_max must be >= 0")
        if len(self.normalize_mean) != 3 or len(self.normalize_std) != 3:
            raise AugmentConfigError("normalisation constants need 3 entries")
        if any(s == 0 for s in self.normalize_std):
            raise AugmentConfigError("normalize_std entries must be non-zero")


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def _id_hash(sample_id) -> int:
    return int.from_bytes(hashlib.blake2b(str(sample_id).encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(master_seed: int, sample_id, epoch: int) -> int:
    """64-bit stream seed mixed from the master seed, sample id and epoch."""
    h = _splitmix64(master_seed & _MASK64)
    h = _splitmix64(h ^ _id_hash(sample_id))
    return _splitmix64(h ^ (epoch & _MASK64))


# ---------------------------------------------------------------------------
# resampling helpers
# ---------------------------------------------------------------------------

def _bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``image`` at float coordinates, clamping to the border."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    top = image[y0, x0] + (image[y0, x1] - image[y0, x0]) * fx
    bot = image[y1, x0] + (image[y1, x1] - image[y1, x0]) * fx
    return top + (bot - top) * fy


def resize_window(sample: ImageSample, top: int, left: int, height: int, width: int, size: int) -> ImageSample:
    """Crop the window and resample it to ``size`` x ``size``."""
    sy, sx = height / size, width / size
    dst = np.arange(size) + 0.5
    ys = top + dst * sy - 0.5
    xs = left + dst * sx - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    image = _bilinear(sample.image, yy, xx)
    my = top + np.minimum(np.floor(dst * sy).astype(np.intp), height - 1)
    mx = left + np.minimum(np.floor(dst * sx).astype(np.intp), width - 1)
    mask = sample.mask[my[:, None], mx[None, :]]
    return replace(sample, image=image, mask=mask, params=dict(sample.params))


# ---------------------------------------------------------------------------
# individual transforms
# ---------------------------------------------------------------------------

def sample_crop_window(h: int, w: int, rng: np.random.Generator, cfg: AugmentConfig) -> Tuple[int, int, int, int]:
    """(top, left, height, width) whose area fraction lies in ``crop_area_range``."""
    lo, hi = cfg.crop_area_range
    log_r = (math.log(cfg.crop_aspect_range[0]), math.log(cfg.crop_aspect_range[1]))
    area = h * w
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(frac * area * ratio)))
        ch = int(round(math.sqrt(frac * area / ratio)))
        if 0 < cw <= w and 0 < ch <= h and lo <= cw * ch / area <= hi:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    # centre fallback: the most square window whose area is closest to the range middle
    target = 0.5 * (lo + hi) * area
    best = None
    for ch in range(1, h + 1):
        cw = min(w, max(1, int(round(target / ch))))
        score = (not lo <= ch * cw / area <= hi, abs(ch * cw - target), abs(ch - cw))
        if best is None or score < best[0]:
            best = (score, ch, cw)
    _, ch, cw = best
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def random_resized_crop(sample: ImageSample, rng: np.random.Generator, cfg: AugmentConfig) -> ImageSample:
    h, w = sample.mask.shape
    if h < 2 or w < 2:
        raise ValueError(f"sample {sample.id!r}: source extent {h}x{w} is too small to crop")
    top, left, ch, cw = sample_crop_window(h, w, rng, cfg)
    out = resize_window(sample, top, left, ch, cw, cfg.output_size)
    out.params["crop"] = [top, left, ch, cw]
    out.params["crop_area_fraction"] = ch * cw / (h * w)
    return out


def vflip(sample: ImageSample) -> ImageSample:
    return replace(sample, image=sample.image[::-1].copy(), mask=sample.mask[::-1].copy(), params=dict(sample.params))


def hflip(sample: ImageSample) -> ImageSample:
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy(), params=dict(sample.params))


def random_flip(sample: ImageSample, rng: np.random.Generator, cfg: AugmentConfig) -> ImageSample:
    """Vertical then horizontal flip, each with probability ``flip_prob``."""
    do_v = bool(rng.random() < cfg.flip_prob)
    do_h = bool(rng.random() < cfg.flip_prob)
    out = vflip(sample) if do_v else replace(sample, params=dict(sample.params))
    out = hflip(out) if do_h else out
    out.params["vflip"], out.params["hflip"] = do_v, do_h
    return out


def rotate(sample: ImageSample, angle_deg: float) -> ImageSample:
    """Rotate about the image centre; uncovered pixels become 0 / background."""
    if angle_deg == 0:
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy(), params=dict(sample.params))
    h, w = sample.mask.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = math.radians(angle_deg)
    c, s = math.cos(t), math.sin(t)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source coordinate
    src_y = cy + c * dy - s * dx
    src_x = cx + s * dy + c * dx
    ny = np.floor(src_y + 0.5).astype(np.intp)
    nx = np.floor(src_x + 0.5).astype(np.intp)
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    mask = np.zeros_like(sample.mask)
    mask[valid] = sample.mask[ny[valid], nx[valid]]
    image = np.where(valid[..., None], _bilinear(sample.image, src_y, src_x), 0.0)
    return replace(sample, image=image, mask=mask, params=dict(sample.params))


def random_rotate(sample: ImageSample, rng: np.random.Generator, cfg: AugmentConfig) -> ImageSample:
    lo, hi = cfg.rotation_range
    angle = float(rng.uniform(lo, hi))
    out = rotate(sample, angle)
    out.params["angle"] = angle
    return out


def adjust(sample: ImageSample, delta: float, scale: float) -> ImageSample:
    """Contrast ``scale`` about the image mean plus brightness ``delta``, clamped to [0, 1]."""
    img = sample.image
    out = img + (scale - 1.0) * (img - img.mean()) + delta
    return replace(sample, image=np.clip(out, 0.0, 1.0), params=dict(sample.params))


def random_photometric(sample: ImageSample, rng: np.random.Generator, cfg: AugmentConfig) -> ImageSample:
    apply = bool(rng.random() < cfg.photometric_prob)
    delta = float(rng.uniform(-cfg.brightness_delta_max, cfg.brightness_delta_max))
    scale = float(rng.uniform(*cfg.contrast_factor_range))
    if not apply:
        delta, scale = 0.0, 1.0
    out = adjust(sample, delta, scale)
    out.params["brightness"], out.params["contrast"] = delta, scale
    return out


def normalize(sample: ImageSample, cfg: AugmentConfig) -> ImageSample:
    std = np.asarray(cfg.normalize_std, dtype=np.float64)
    if np.any(std == 0):
        raise AugmentConfigError("normalize_std entries must be non-zero")
    mean = np.asarray(cfg.normalize_mean, dtype=np.float64)
    return replace(sample, image=(sample.image - mean) / std, params=dict(sample.params))


def denormalize(image: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return image * np.asarray(cfg.normalize_std) + np.asarray(cfg.normalize_mean)


def augment_pair(sample: ImageSample, epoch: int, cfg: AugmentConfig) -> ImageSample:
    seed = derive_seed(cfg.master_seed, sample.id, epoch)
    rng = np.random.default_rng(seed)
    out = random_resized_crop(sample, rng, cfg)
    out = random_flip(out, rng, cfg)
    out = random_rotate(out, rng, cfg)
    out = random_photometric(out, rng, cfg)
    out = normalize(out, cfg)
    out.params["seed"] = seed
    return out


def prepare_eval(sample: ImageSample, cfg: AugmentConfig) -> ImageSample:
    """Validation-time preprocessing: normalisation only."""
    return normalize(sample, cfg)
