"""Dataset directories, image file IO and the synthetic toy image set.

A dataset directory holds 8/16-bit greyscale or RGB raster files. An optional
``manifest.json`` lists entries as::

    {"images": [{"file": "a.png", "colorspace": "grey", "clean": "clean/a.png"}]}

Without a manifest every image file in the directory is used, colorspace
taken from the run mode, and no clean reference is attached.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError
from .imagepipe import ImageSample

IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".jpeg", ".pgm", ".ppm")
MANIFEST = "manifest.json"


def read_image(path) -> tuple[np.ndarray, int]:
    """Return ``(pixels HxWxC float32 in [0,1], bit depth)``.

    Depth is 8 or 16 for integer rasters and 32 for float TIFFs.
    """
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8:
        depth, scale = 8, 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16):
        depth, scale = 16, 65535.0
    elif arr.dtype == bool:
        depth, scale = 8, 1.0
    elif arr.dtype == np.float32:
        depth, scale = 32, 1.0
    else:
        raise FormatError(f"unsupported pixel type {arr.dtype} in {path}")
    if arr.ndim == 2:
        arr = arr[..., None]
    elif arr.ndim == 3 and arr.shape[-1] == 4:
        arr = arr[..., :3]
    return (arr.astype(np.float64) / scale).clip(0, 1).astype(np.float32), depth


def write_image(path, pixels: np.ndarray, depth: int = 8) -> Path:
    path = Path(path)
    x = np.clip(pixels, 0.0, 1.0)
    if depth == 32:
        if x.shape[-1] != 1:
            raise FormatError("float output is single-channel only")
        Image.fromarray(x[..., 0].astype(np.float32), mode="F").save(path)
        return path
    if depth == 16:
        arr = np.round(x * 65535.0).astype(np.uint16)
    else:
        arr = np.round(x * 255.0).astype(np.uint8)
    if arr.shape[-1] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)
    return path


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _coerce_channels(pixels: np.ndarray, colorspace: str, path) -> np.ndarray:
    want = 3 if colorspace == "srgb" else 1
    c = pixels.shape[-1]
    if c == want:
        return pixels
    if want == 3 and c == 1:
        return np.repeat(pixels, 3, axis=-1)
    raise ConfigError(f"{path}: {c}-channel image does not fit colorspace {colorspace!r}")


def load_dataset(directory, colorspace: str) -> list[ImageSample]:
    """Load every sample of a dataset directory (manifest-driven when present)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"data directory {directory} does not exist")
    manifest = directory / MANIFEST
    samples = []
    if manifest.exists():
        try:
            entries = json.loads(manifest.read_text())["images"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{manifest}: {exc}") from exc
        for e in entries:
            cs = e.get("colorspace", colorspace)
            if cs != colorspace:
                raise ConfigError(f"{e['file']}: colorspace {cs!r} does not match run mode ({colorspace!r})")
            pixels = _coerce_channels(read_image(directory / e["file"])[0], cs, e["file"])
            clean = None
            if e.get("clean"):
                clean = _coerce_channels(read_image(directory / e["clean"])[0], cs, e["clean"])
            samples.append(ImageSample(pixels, cs, clean, Path(e["file"]).stem))
    else:
        for p in list_images(directory):
            pixels = _coerce_channels(read_image(p)[0], colorspace, p)
            samples.append(ImageSample(pixels, colorspace, None, p.stem))
    if not samples:
        raise ConfigError(f"no images found in {directory}")
    return samples


def toy_images(n: int = 20, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    """Procedural greyscale scenes: shaded background, occluding shapes, stripe textures.

    Values stay inside ``[0.1, 0.9]`` so additive noise is rarely clipped.
    """
    out = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        gx, gy = rng.uniform(-0.3, 0.3, 2)
        img = 0.5 + gx * (xx - 0.5) + gy * (yy - 0.5)
        for _ in range(rng.integers(6, 12)):
            cy, cx = rng.uniform(0, 1, 2)
            level = rng.uniform(0.15, 0.85)
            kind = rng.integers(3)
            if kind == 0:
                r = rng.uniform(0.05, 0.25)
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
            elif kind == 1:
                hh, ww = rng.uniform(0.05, 0.35, 2)
                shape = (np.abs(yy - cy) < hh / 2) & (np.abs(xx - cx) < ww / 2)
            else:
                r = rng.uniform(0.1, 0.3)
                shape = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
                theta = rng.uniform(0, np.pi)
                freq = rng.uniform(6, 14)
                stripes = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
                level = level + 0.12 * stripes
            img = np.where(shape, level, img)
        out.append(np.clip(img, 0.1, 0.9).astype(np.float32)[..., None])
    return out
