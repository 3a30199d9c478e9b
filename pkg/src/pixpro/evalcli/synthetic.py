"""Synthetic scenes: textured, coloured shapes on noise backgrounds with dense labels.

Class 0 is background. Each foreground class k has a fixed shape kind and a
fixed texture, while colour is drawn per object, so recognising a class
requires shape and texture cues rather than colour. The largest object is
drawn last and gives the scene its image-level label.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import MANIFEST_NAME
from ..viewgen import save_image, save_label_map

SHAPES = ("ellipse", "rectangle", "stripe")
TEXTURES = ("solid", "hstripes", "checker", "vstripes", "dots", "diagonal")


@dataclass
class SyntheticScene:
    image: np.ndarray      # [3, H, W] float64 in [0, 1]
    labels: np.ndarray     # [H, W] uint8 in {0..K-1}
    label: int             # image-level label (class of the dominant object)
    seed: int


def class_style(k: int) -> tuple[str, str]:
    """Shape kind and texture of foreground class ``k >= 1``."""
    j = k - 1
    return SHAPES[j % len(SHAPES)], TEXTURES[(j // len(SHAPES) + j) % len(TEXTURES)]


def _shape_mask(kind: str, size: int, rng: np.random.Generator, extent: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    half = extent * size / 2
    if kind == "ellipse":
        ry, rx = half * rng.uniform(0.8, 1.2, size=2)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    if kind == "rectangle":
        hy, hx = half * rng.uniform(0.7, 1.1, size=2)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # a straight band across the image at a random angle
    theta = rng.uniform(0, np.pi)
    d = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    return np.abs(d) <= half * 0.6


def _texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Modulation pattern in [0, 1] of shape [H, W]."""
    yy, xx = np.mgrid[0:size, 0:size]
    period = max(size // 8, 2)
    phase = int(rng.integers(period))
    if kind == "solid":
        return np.ones((size, size))
    if kind == "hstripes":
        return (((yy + phase) // (period // 2 or 1)) % 2).astype(float)
    if kind == "vstripes":
        return (((xx + phase) // (period // 2 or 1)) % 2).astype(float)
    if kind == "checker":
        return ((((yy + phase) // period) + ((xx + phase) // period)) % 2).astype(float)
    if kind == "dots":
        return (((yy + phase) % period < period // 2) & ((xx + phase) % period < period // 2)).astype(float)
    return (((xx + yy + phase) // (period // 2 or 1)) % 2).astype(float)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(0.2, 0.8, size=(3, 1, 1))
    ramp = np.linspace(-0.5, 0.5, size)
    gy, gx = rng.uniform(-0.2, 0.2, size=2)
    grad = gy * ramp[:, None] + gx * ramp[None, :]
    return base + grad[None] + rng.normal(0, 0.08, size=(3, size, size))


def _colour(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    a = rng.uniform(0, 1, size=3)
    b = rng.uniform(0, 1, size=3)
    # keep the two texture colours visibly apart
    while np.abs(a - b).sum() < 0.6:
        b = rng.uniform(0, 1, size=3)
    return a, b


def make_scene(seed: int, size: int = 32, n_classes: int = 5,
               class_weights: np.ndarray | None = None, max_objects: int = 2) -> SyntheticScene:
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2 (background plus one object class)")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), size, n_classes]))
    weights = class_weights_or_uniform(n_classes, class_weights)
    image = _background(size, rng)
    labels = np.zeros((size, size), dtype=np.uint8)
    n_extra = int(rng.integers(0, max_objects))
    # distractor objects first (smaller), then the dominant one
    extents = list(rng.uniform(0.25, 0.4, size=n_extra)) + [rng.uniform(0.6, 0.8)]
    classes = list(rng.integers(1, n_classes, size=n_extra)) + [int(rng.choice(np.arange(1, n_classes), p=weights))]
    for k, extent in zip(classes, extents):
        shape, texture = class_style(int(k))
        mask = _shape_mask(shape, size, rng, extent)
        pattern = _texture(texture, size, rng)
        ca, cb = _colour(rng)
        fill = ca[:, None, None] * pattern[None] + cb[:, None, None] * (1 - pattern[None])
        fill = fill + rng.normal(0, 0.03, size=fill.shape)
        image = np.where(mask[None], fill, image)
        labels[mask] = int(k)
    return SyntheticScene(np.clip(image, 0.0, 1.0), labels, int(classes[-1]), int(seed))


def class_weights_or_uniform(n_classes: int, class_weights) -> np.ndarray:
    """Mixture over the foreground classes 1..K-1 for the dominant object."""
    if class_weights is None:
        return np.full(n_classes - 1, 1.0 / (n_classes - 1))
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (n_classes - 1,) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError(f"class_weights must be {n_classes - 1} non-negative numbers")
    return w / w.sum()


def gen_synthetic_dataset(n_images: int, size: int, n_classes: int, seed: int, out_dir: str | Path,
                          class_weights=None) -> Path:
    """Write ``images/``, ``labels/`` (PNG) and ``manifest.jsonl`` under ``out_dir``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(int(seed)).generate_state(n_images)
    lines = []
    for i in range(n_images):
        scene = make_scene(int(seeds[i]), size, n_classes, class_weights)
        img_rel, lab_rel = f"images/{i:06d}.png", f"labels/{i:06d}.png"
        save_image(out / img_rel, scene.image)
        save_label_map(out / lab_rel, scene.labels)
        lines.append(json.dumps({"id": i, "image": img_rel, "labels": lab_rel, "label": scene.label,
                                 "seed": scene.seed}, sort_keys=True))
    (out / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return out
