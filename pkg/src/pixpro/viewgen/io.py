"""8-bit image files (binary PPM and PNG) to and from [0, 1] float arrays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PPM (P6) or PNG as a float64 [3, H, W] array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a [3, H, W] float image; the format follows the suffix (.png or .ppm)."""
    arr = to_uint8(image).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(arr), mode="RGB").save(path)


def save_label_map(path: str | Path, labels: np.ndarray) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def load_label_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()
