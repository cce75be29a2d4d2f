"""
Photometric image augmentation, depth re-noising, and horizontal flips.

Transforms run in a fixed order: radial distortion, motion blur, Gaussian
blur, vignetting, brightness, per-pixel noise, then clamp to [0, 255].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .models import wrap_angle
from .scenegen import Sample, ToFModel


@dataclass(frozen=True)
class Stage:
    enabled: bool = True
    low: float = 0.0
    high: float = 0.0

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high)) if self.high > self.low else float(self.low)


@dataclass(frozen=True)
class AugmentationRecipe:
    """Sampling ranges for each stage; a disabled stage is skipped entirely."""
    distortion: Stage = Stage(True, -0.15, 0.15)        # k1
    motion_length: Stage = Stage(True, 1.0, 9.0)        # px
    motion_angle: Stage = Stage(True, 0.0, math.pi)
    gaussian_sigma: Stage = Stage(True, 0.0, 1.5)       # px
    vignette: Stage = Stage(True, 0.0, 0.4)
    gain: Stage = Stage(True, 0.6, 1.4)
    offset: Stage = Stage(True, -25.0, 25.0)
    noise_sigma: Stage = Stage(True, 0.0, 12.0)

    @classmethod
    def identity(cls) -> "AugmentationRecipe":
        off = Stage(False)
        return cls(off, off, off, off, off, off, off, off)


@dataclass(frozen=True)
class DrawnAugmentation:
    k1: Optional[float]
    motion: Optional[Tuple[int, float]]
    sigma: Optional[float]
    vignette: Optional[float]
    gain: Optional[float]
    offset: Optional[float]
    noise: Optional[float]


def draw(recipe: AugmentationRecipe, rng: np.random.Generator) -> DrawnAugmentation:
    """Fixed draw order so every parameter consumes the same rng slot."""
    vals = {}
    for key in ("distortion", "motion_length", "motion_angle", "gaussian_sigma",
                "vignette", "gain", "offset", "noise_sigma"):
        stage = getattr(recipe, key)
        v = stage.draw(rng)
        vals[key] = v if stage.enabled else None
    motion = None
    if vals["motion_length"] is not None:
        motion = (max(1, int(round(vals["motion_length"]))), vals["motion_angle"] or 0.0)
    return DrawnAugmentation(vals["distortion"], motion, vals["gaussian_sigma"],
                             vals["vignette"], vals["gain"], vals["offset"], vals["noise_sigma"])


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` pixels at ``angle`` radians."""
    if length < 1:
        raise ValueError("motion blur length must be >= 1")
    if length == 1:
        return np.ones((1, 1))
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, 4 * length)
    xs = c + ts * math.cos(angle)
    ys = c - ts * math.sin(angle)
    x0, y0 = np.floor(xs).astype(int), np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = np.clip(x0 + dx, 0, size - 1)
        yi = np.clip(y0 + dy, 0, size - 1)
        np.add.at(k, (yi, xi), w)
    return k / k.sum()


def radial_distort(img: np.ndarray, k1: float) -> np.ndarray:
    h, w = img.shape
    f = max(h, w) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    xn = (xx - (w - 1) / 2.0) / f
    yn = (yy - (h - 1) / 2.0) / f
    scale = 1.0 + k1 * (xn * xn + yn * yn)
    src_x = xn * scale * f + (w - 1) / 2.0
    src_y = yn * scale * f + (h - 1) / 2.0
    return ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="nearest")


def vignette(img: np.ndarray, strength: float) -> np.ndarray:
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    r2 = ((xx - (w - 1) / 2.0) ** 2 + (yy - (h - 1) / 2.0) ** 2)
    r2 /= r2.max()
    return img * (1.0 - strength * r2)


def apply(image: np.ndarray, aug: DrawnAugmentation, rng: np.random.Generator) -> np.ndarray:
    img = image.astype(np.float64)
    if aug.k1 is not None and aug.k1 != 0.0:
        img = radial_distort(img, aug.k1)
    if aug.motion is not None and aug.motion[0] > 1:
        img = ndimage.convolve(img, motion_kernel(*aug.motion), mode="reflect")
    if aug.sigma is not None and aug.sigma > 0:
        img = ndimage.gaussian_filter(img, aug.sigma, mode="reflect")
    if aug.vignette is not None and aug.vignette > 0:
        img = vignette(img, aug.vignette)
    if aug.gain is not None:
        img = img * aug.gain
    if aug.offset is not None:
        img = img + aug.offset
    if aug.noise is not None and aug.noise > 0:
        img = img + rng.standard_normal(img.shape) * aug.noise
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def augment_image(image: np.ndarray, recipe: AugmentationRecipe, rng_seed) -> np.ndarray:
    """One augmented copy of a uint8 image; deterministic per seed."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a single-channel image")
    rng = np.random.default_rng(rng_seed)
    return apply(image, draw(recipe, rng), rng)


def hflip_label(label) -> np.ndarray:
    x, y, z, th = np.asarray(label, dtype=float)
    return np.array([x, -y, z, wrap_angle(-th)])


def hflip_pair(sample: Sample) -> Sample:
    """Mirror image and depth columns; map the label (x, y, z, t) -> (x, -y, z, -t)."""
    clean = None if sample.depth_clean is None else sample.depth_clean[:, ::-1].copy()
    return replace(sample, image=sample.image[:, ::-1].copy(), depth=sample.depth[:, ::-1].copy(),
                   label=hflip_label(sample.label), depth_clean=clean)


def flip_decisions(n: int, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    return rng.random(n) < p


def expand_sample(sample: Sample, k: int, rng_seed, recipe: AugmentationRecipe = AugmentationRecipe(),
                  tof: Optional[ToFModel] = ToFModel(), flip_p: float = 0.0) -> List[Sample]:
    """``k`` augmented copies with independent recipes and freshly noised depth.

    Depth noise is drawn around ``sample.depth_clean`` when present. Pass
    ``tof=None`` to copy the depth map unchanged. ``flip_p`` mirrors each
    copy with that probability.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ss = np.random.SeedSequence(rng_seed if isinstance(rng_seed, (list, tuple)) else [int(rng_seed)])
    out = []
    for child in ss.spawn(k):
        rng = np.random.default_rng(child)
        image = apply(sample.image, draw(recipe, rng), rng)
        base = sample.depth_clean if sample.depth_clean is not None else sample.depth
        depth = tof.add_noise(base, rng) if tof is not None else sample.depth.copy()
        s = replace(sample, image=image, depth=depth, label=np.array(sample.label, dtype=float))
        if flip_p > 0 and rng.random() < flip_p:
            s = hflip_pair(s)
        out.append(s)
    return out
