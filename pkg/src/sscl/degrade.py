"""Replayable input degradations (the reconstruction pretext task) and the
paired-view sampler for contrastive pretraining.

A DegradationRecipe captures the full corruption of one stack: Gaussian blur
(applied first), spatially-aligned cutout boxes zeroed on all channels, then
whole-channel dropout (dropped channels are zeroed, not removed, so tensor
shapes stay static). Recipes serialize to JSON and replay bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import ChannelStack


@dataclass(frozen=True)
class DegradationRecipe:
    dropped_channels: tuple[bool, ...]
    cutout_boxes: tuple[tuple[int, int, int, int], ...]  # (y, x, h, w)
    blur_sigma: float
    source_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dropped_channels", tuple(bool(b) for b in self.dropped_channels))
        object.__setattr__(self, "cutout_boxes", tuple(tuple(int(v) for v in b) for b in self.cutout_boxes))
        if all(self.dropped_channels):
            raise ValueError("at least one channel must survive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")

    def to_json(self) -> str:
        return json.dumps({
            "dropped_channels": list(self.dropped_channels),
            "cutout_boxes": [list(b) for b in self.cutout_boxes],
            "blur_sigma": self.blur_sigma,
            "source_seed": self.source_seed,
        })

    @staticmethod
    def from_json(s: str) -> "DegradationRecipe":
        d = json.loads(s)
        return DegradationRecipe(
            tuple(d["dropped_channels"]),
            tuple(tuple(b) for b in d["cutout_boxes"]),
            d["blur_sigma"],
            d["source_seed"],
        )


@dataclass(frozen=True)
class ViewPair:
    y: int
    x: int
    size: int
    c1: int
    c2: int
    sample_id: str = ""

    def __post_init__(self):
        if self.c1 == self.c2:
            raise ValueError("view channels must differ")


def sample_recipe(C: int, H: int, W: int, p_drop: float, rng: np.random.Generator,
                  cutout_count: int = 10,
                  cutout_range: tuple[int, int] = (10, 30),
                  sigma_range: tuple[float, float] = (0.1, 2.0),
                  source_seed: int | None = None) -> DegradationRecipe:
    """Draw a recipe: independent channel dropout with survivor guarantee,
    cutout boxes with integer sizes uniform in cutout_range and positions
    uniform over valid placements, blur sigma uniform in sigma_range."""
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    dropped = rng.random(C) < p_drop
    if dropped.all():
        dropped[rng.integers(0, C)] = False
    lo, hi = cutout_range
    lo = min(lo, H, W)
    boxes = []
    for _ in range(cutout_count):
        bh = int(rng.integers(lo, min(hi, H) + 1))
        bw = int(rng.integers(lo, min(hi, W) + 1))
        by = int(rng.integers(0, H - bh + 1))
        bx = int(rng.integers(0, W - bw + 1))
        boxes.append((by, bx, bh, bw))
    sigma = float(rng.uniform(*sigma_range))
    return DegradationRecipe(tuple(dropped), tuple(boxes), sigma, source_seed)


def gaussian_kernel1d(sigma: float, dtype=np.float64) -> np.ndarray:
    """Normalized 1-D Gaussian, radius ceil(3*sigma)."""
    r = math.ceil(3.0 * sigma)
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(dtype)


def gaussian_kernel2d(sigma: float, dtype=np.float64) -> np.ndarray:
    k = gaussian_kernel1d(sigma, np.float64)
    return np.outer(k, k).astype(dtype)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of an H x W (or C x H x W) array with reflect
    padding. sigma == 0 is the identity."""
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel1d(sigma)
    r = (len(k) - 1) // 2
    if image.ndim == 2:
        img = image[None]
        squeeze = True
    else:
        img = image
        squeeze = False
    padded = np.pad(img.astype(np.float64), [(0, 0), (r, r), (0, 0)], mode="reflect")
    tmp = np.zeros_like(img, dtype=np.float64)
    for i, kv in enumerate(k):
        tmp += kv * padded[:, i : i + img.shape[1], :]
    padded = np.pad(tmp, [(0, 0), (0, 0), (r, r)], mode="reflect")
    out = np.zeros_like(tmp)
    for i, kv in enumerate(k):
        out += kv * padded[:, :, i : i + img.shape[2]]
    out = out.astype(image.dtype)
    return out[0] if squeeze else out


def apply_recipe(stack: ChannelStack, recipe: DegradationRecipe) -> ChannelStack:
    """Blur -> cutout (all channels) -> channel dropout. Pure function."""
    if len(recipe.dropped_channels) != stack.C:
        raise ValueError(
            f"recipe has {len(recipe.dropped_channels)} channels, stack has {stack.C}"
        )
    for (y, x, h, w) in recipe.cutout_boxes:
        if y < 0 or x < 0 or y + h > stack.H or x + w > stack.W:
            raise ValueError(f"cutout box {(y, x, h, w)} outside {stack.H}x{stack.W} raster")
    out = gaussian_blur(stack.data, recipe.blur_sigma)
    for (y, x, h, w) in recipe.cutout_boxes:
        out[:, y : y + h, x : x + w] = 0.0
    for ci, dropped in enumerate(recipe.dropped_channels):
        if dropped:
            out[ci] = 0.0
    return ChannelStack(out, stack.channel_meta)


def apply_recipe_array(x: np.ndarray, recipe: DegradationRecipe) -> np.ndarray:
    """apply_recipe on a bare C x H x W array (used on training crops, which
    can be smaller than the 16 px ChannelStack minimum)."""
    c, hh, ww = x.shape
    if len(recipe.dropped_channels) != c:
        raise ValueError(
            f"recipe has {len(recipe.dropped_channels)} channels, array has {c}"
        )
    for (y, bx, h, w) in recipe.cutout_boxes:
        if y < 0 or bx < 0 or y + h > hh or bx + w > ww:
            raise ValueError(f"cutout box {(y, bx, h, w)} outside {hh}x{ww} raster")
    out = gaussian_blur(x, recipe.blur_sigma)
    for (y, bx, h, w) in recipe.cutout_boxes:
        out[:, y : y + h, bx : bx + w] = 0.0
    for ci, dropped in enumerate(recipe.dropped_channels):
        if dropped:
            out[ci] = 0.0
    return out


def sample_view_pair(stack_data: np.ndarray, patch_size: int,
                     rng: np.random.Generator, sample_id: str = ""):
    """One uniform patch location, two distinct uniform channels; returns the
    two single-channel patches (same location) plus the ViewPair record."""
    c, h, w = stack_data.shape
    if c < 2:
        raise ValueError("need at least 2 channels to form a view pair")
    if patch_size > min(h, w):
        raise ValueError("patch_size exceeds raster dims")
    y = int(rng.integers(0, h - patch_size + 1))
    x = int(rng.integers(0, w - patch_size + 1))
    c1 = int(rng.integers(0, c))
    c2 = int(rng.integers(0, c - 1))
    if c2 >= c1:
        c2 += 1
    pair = ViewPair(y, x, patch_size, c1, c2, sample_id)
    v1 = stack_data[c1, y : y + patch_size, x : x + patch_size].copy()
    v2 = stack_data[c2, y : y + patch_size, x : x + patch_size].copy()
    return v1, v2, pair
