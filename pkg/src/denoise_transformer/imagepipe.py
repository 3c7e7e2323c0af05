"""Exact image transforms: pixel-shuffle downsampling, Bayer packing,
blind-spot mask mapping, augmentation and synthetic noise.

Images are numpy arrays shaped ``(H, W, C)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

COLORSPACES = ("srgb", "raw-bayer", "grey")


@dataclass
class ImageSample:
    pixels: np.ndarray
    colorspace: str = "srgb"
    clean: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ShapeError(f"pixels must be HxWxC, got shape {self.pixels.shape}")
        h, w, _ = self.pixels.shape
        if h < 8 or w < 8:
            raise ShapeError(f"image {h}x{w} smaller than 8x8")
        if self.colorspace not in COLORSPACES:
            raise ConfigError(f"unknown colorspace {self.colorspace!r}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        if self.clean is not None and self.clean.shape != self.pixels.shape:
            raise ShapeError(f"clean shape {self.clean.shape} != noisy shape {self.pixels.shape}")


@dataclass
class NoiseSpec:
    """Gaussian noise level range on the 0-255 scale."""

    sigma_min: float
    sigma_max: float
    per_image_sigma: bool = True

    def __post_init__(self):
        if not 0 <= self.sigma_min <= self.sigma_max:
            raise ConfigError(f"need 0 <= sigma_min <= sigma_max, got {self.sigma_min}, {self.sigma_max}")


@dataclass
class BlindStack:
    """``stride**2`` blind images and the boolean mask each one carries."""

    blinds: np.ndarray  # (s*s, H, W, C)
    masks: np.ndarray  # (s*s, H, W) bool
    stride: int

    def __len__(self) -> int:
        return len(self.blinds)

    def positions(self, k: int) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.masks[k])
        return list(zip(rows.tolist(), cols.tolist()))

    def owner(self) -> np.ndarray:
        """``(H, W)`` index of the entry that masks each pixel."""
        return np.argmax(self.masks, axis=0)


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise ShapeError(f"expected HxWxC array, got shape {img.shape}")


def pd_split(img: np.ndarray, p: int) -> list[np.ndarray]:
    """Pixel-shuffle downsample into ``p*p`` sub-images, row-major in the phase ``(a, b)``."""
    _check_image(img)
    h, w, _ = img.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by pd factor {p}")
    return [np.ascontiguousarray(img[a::p, b::p]) for a in range(p) for b in range(p)]


def pd_merge(subs, p: int) -> np.ndarray:
    subs = list(subs)
    if p < 1 or len(subs) != p * p:
        raise ShapeError(f"pd_merge needs {p * p} sub-images, got {len(subs)}")
    shape = subs[0].shape
    if len(shape) != 3 or any(s.shape != shape for s in subs):
        raise ShapeError("sub-images must share one HxWxC shape")
    h, w, c = shape
    out = np.empty((h * p, w * p, c), dtype=subs[0].dtype)
    for idx, sub in enumerate(subs):
        a, b = divmod(idx, p)
        out[a::p, b::p] = sub
    return out


def bayer_split(raw: np.ndarray) -> np.ndarray:
    """Pack an ``H x W x 1`` mosaic into ``H/2 x W/2 x 4`` planes, phases (0,0),(0,1),(1,0),(1,1)."""
    _check_image(raw)
    h, w, c = raw.shape
    if c != 1:
        raise ShapeError(f"raw mosaic must have 1 channel, got {c}")
    if h % 2 or w % 2:
        raise ShapeError(f"raw mosaic {h}x{w} must have even dimensions")
    return np.concatenate(pd_split(raw, 2), axis=-1)


def bayer_merge(quad: np.ndarray) -> np.ndarray:
    _check_image(quad)
    if quad.shape[-1] != 4:
        raise ShapeError(f"packed Bayer image must have 4 channels, got {quad.shape[-1]}")
    return pd_merge([quad[..., i:i + 1] for i in range(4)], 2)


def neighbor_mean(img: np.ndarray) -> np.ndarray:
    """Mean of the valid 4-neighbours of every pixel (the pixel itself excluded).

    Computed as ``ref + mean(n - ref)`` with ``ref`` the first valid neighbour,
    so a constant image maps to itself bit-exactly.
    """
    _check_image(img)
    h, w, _ = img.shape
    if h * w < 2:
        raise ShapeError("image needs at least two pixels to have neighbours")
    padded = np.pad(img.astype(np.float64), ((1, 1), (1, 1), (0, 0)), constant_values=np.nan)
    nbrs = np.stack([padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]])
    first = np.argmax(~np.isnan(nbrs), axis=0)
    ref = np.take_along_axis(nbrs, first[None], axis=0)[0]
    return (ref + np.nanmean(nbrs - ref, axis=0)).astype(img.dtype)


def mask_map(img: np.ndarray, s: int) -> BlindStack:
    """Build the ``s*s`` blind images of ``img``.

    Entry ``k = a*s + b`` masks every pixel ``(s*i + a, s*j + b)``; a masked
    pixel is replaced by the mean of its valid 4-neighbours in ``img``.
    """
    _check_image(img)
    h, w, _ = img.shape
    if s < 1 or s > min(h, w):
        raise ConfigError(f"mask stride {s} invalid for {h}x{w} image")
    fill = neighbor_mean(img)
    rows = np.arange(h)[:, None] % s
    cols = np.arange(w)[None, :] % s
    owner = rows * s + cols
    masks = owner[None] == np.arange(s * s)[:, None, None]
    blinds = np.where(masks[..., None], fill[None], img[None])
    return BlindStack(blinds=blinds, masks=masks, stride=s)


def collect_blind(outputs: np.ndarray, stack: BlindStack) -> np.ndarray:
    """Assemble one image taking each pixel from the output whose input masked it."""
    outputs = np.asarray(outputs)
    if outputs.ndim != 4 or len(outputs) != len(stack.masks):
        raise ShapeError(f"expected {len(stack.masks)} outputs, got array of shape {outputs.shape}")
    if outputs.shape[1:3] != stack.masks.shape[1:]:
        raise ShapeError(f"output size {outputs.shape[1:3]} != mask size {stack.masks.shape[1:]}")
    owner = stack.owner()
    return np.take_along_axis(outputs, owner[None, :, :, None], axis=0)[0]


def add_gaussian(img: np.ndarray, spec: NoiseSpec, seed) -> np.ndarray:
    """Add zero-mean Gaussian noise with sigma drawn uniformly from the spec, then clip.

    With ``per_image_sigma`` false, sigma is drawn independently per pixel.
    """
    rng = np.random.default_rng(seed)
    size = None if spec.per_image_sigma else img.shape[:2] + (1,)
    sigma = rng.uniform(spec.sigma_min, spec.sigma_max, size=size) / 255.0
    noise = rng.standard_normal(img.shape) * sigma
    return np.clip(img + noise, 0.0, 1.0).astype(img.dtype)


def augment(img: np.ndarray, crop: int, seed, paired: np.ndarray | None = None,
            rotate: bool | None = None, hflip: bool | None = None, vflip: bool | None = None):
    """Random crop, optional 90 degree rotation and horizontal/vertical flips.

    ``paired`` (e.g. the clean reference) receives the identical transform.
    Any of ``rotate``/``hflip``/``vflip`` can be forced instead of drawn.
    Returns the augmented image, or a ``(img, paired)`` tuple when paired.
    """
    _check_image(img)
    h, w, _ = img.shape
    if crop < 1 or crop > min(h, w):
        raise ShapeError(f"crop {crop} larger than image {h}x{w}")
    if paired is not None and paired.shape != img.shape:
        raise ShapeError(f"paired shape {paired.shape} != {img.shape}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    draws = rng.random(3) < 0.5
    rotate = bool(draws[0]) if rotate is None else rotate
    hflip = bool(draws[1]) if hflip is None else hflip
    vflip = bool(draws[2]) if vflip is None else vflip

    def apply(x):
        x = x[top:top + crop, left:left + crop]
        if rotate:
            x = np.rot90(x, 1, axes=(0, 1))
        if hflip:
            x = x[:, ::-1]
        if vflip:
            x = x[::-1]
        return np.ascontiguousarray(x)

    if paired is None:
        return apply(img)
    return apply(img), apply(paired)
