"""Grayscale image loading (PGM, PNG and anything else Pillow reads)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageError(ValueError):
    pass


def read_image(path: str | Path) -> np.ndarray:
    """Return an ``(H, W)`` float32 image in ``[0, 1]``; color is reduced to luminance."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.float64) / 65535.0
            elif img.mode == "F":
                arr = np.asarray(img, dtype=np.float64)
            else:
                # ITU-R 601-2 luma: L = 0.299 R + 0.587 G + 0.114 B
                arr = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from None
    if arr.ndim != 2 or arr.size == 0:
        raise ImageError(f"image {path} has unusable shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Save an ``(H, W)`` image in ``[0, 1]`` as 8-bit grayscale (format from the suffix)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
