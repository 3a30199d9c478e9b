"""Random view sampling: crop, bilinear resize, flip and photometric distortion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import gaussian_filter

from .geometry import CropRecord

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class AugConfig:
    """Augmentation knobs. Per-view pairs are (view A, view B)."""

    out_res: int = 32
    scale: tuple[float, float] = (0.08, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    crop_tries: int = 10
    min_crop: int = 4
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: tuple[float, float] = (1.0, 0.1)
    # sigma range at 224 px; rescaled by out_res / 224
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    solarize_p: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: float = 0.5

    def photometric_off(self) -> AugConfig:
        from dataclasses import replace
        return replace(self, jitter_p=0.0, gray_p=0.0, blur_p=(0.0, 0.0), solarize_p=(0.0, 0.0))


def rng_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent generator keyed by (seed, epoch, sample index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def sample_crop(width: int, height: int, cfg: AugConfig, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random-resized-crop box (x0, y0, w, h); falls back to a centre crop after ``crop_tries`` misses."""
    area = width * height
    lo, hi = cfg.scale
    log_r = (math.log(cfg.ratio[0]), math.log(cfg.ratio[1]))
    for _ in range(cfg.crop_tries):
        target = area * rng.uniform(lo, hi)
        ar = math.exp(rng.uniform(*log_r))
        w = int(round(math.sqrt(target * ar)))
        h = int(round(math.sqrt(target / ar)))
        if 0 < w <= width and 0 < h <= height and lo <= w * h / area <= hi:
            x0 = int(rng.integers(0, width - w + 1))
            y0 = int(rng.integers(0, height - h + 1))
            return x0, y0, w, h
    in_ratio = width / height
    if in_ratio < cfg.ratio[0]:
        w, h = width, int(round(width / cfg.ratio[0]))
    elif in_ratio > cfg.ratio[1]:
        h, w = height, int(round(height * cfg.ratio[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def _interp_matrix(start: float, length: float, out: int, size: int) -> np.ndarray:
    """Row i holds bilinear weights for output sample i over ``size`` source pixels.

    Output pixel centres sit at ``start + (i + 0.5) * length / out`` in
    continuous source coordinates, where source pixel k covers [k, k + 1).
    """
    centres = start + (np.arange(out) + 0.5) * length / out - 0.5
    centres = np.clip(centres, 0.0, size - 1)
    k0 = np.floor(centres).astype(int)
    k1 = np.minimum(k0 + 1, size - 1)
    frac = centres - k0
    m = np.zeros((out, size))
    rows = np.arange(out)
    m[rows, k0] += 1.0 - frac
    m[rows, k1] += frac
    return m


def resized_crop(image: np.ndarray, rec: CropRecord) -> np.ndarray:
    """Bilinear resample of the crop box to ``rec.out_res`` square, then mirror if ``rec.flip``."""
    _, h, w = image.shape
    my = _interp_matrix(rec.y0, rec.h, rec.out_res, h)
    mx = _interp_matrix(rec.x0, rec.w, rec.out_res, w)
    view = my @ image @ mx.T
    if rec.flip:
        view = view[:, :, ::-1]
    return np.ascontiguousarray(view)


def sample_view(image: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> tuple[np.ndarray, CropRecord]:
    _, h, w = image.shape
    if h < cfg.min_crop or w < cfg.min_crop:
        raise ValueError(f"image {w}x{h} is smaller than the minimum crop {cfg.min_crop}")
    x0, y0, cw, ch = sample_crop(w, h, cfg, rng)
    flip = bool(rng.random() < cfg.flip_p)
    rec = CropRecord(x0, y0, cw, ch, cfg.out_res, flip)
    return resized_crop(image, rec), rec


def sample_view_pair(image: np.ndarray, cfg: AugConfig, rng: np.random.Generator):
    """Two independently cropped, resized and possibly flipped views with their records."""
    return sample_view(image, cfg, rng), sample_view(image, cfg, rng)


# -- photometric ----------------------------------------------------------------

def grayscale(view: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, view, axes=(0, 0))


def solarize(view: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.where(view < threshold, view, 1.0 - view)


def gaussian_blur(view: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(view, sigma=(0, sigma, sigma), mode="reflect")


def adjust_hue(view: np.ndarray, shift: float) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(view.transpose(1, 2, 0), 0.0, 1.0))
    hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
    return hsv_to_rgb(hsv).transpose(2, 0, 1)


def color_jitter(view: np.ndarray, cfg: AugConfig, rng: np.random.Generator) -> np.ndarray:
    out = view
    for op in rng.permutation(4):
        if op == 0 and cfg.brightness > 0:
            out = out * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        elif op == 1 and cfg.contrast > 0:
            f = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
            m = grayscale(out).mean()
            out = (out - m) * f + m
        elif op == 2 and cfg.saturation > 0:
            f = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
            g = grayscale(out)[None]
            out = (out - g) * f + g
        elif op == 3 and cfg.hue > 0:
            out = adjust_hue(out, rng.uniform(-cfg.hue, cfg.hue))
        out = np.clip(out, 0.0, 1.0)
    return out


def apply_photometric(view: np.ndarray, rng: np.random.Generator, cfg: AugConfig, which: int = 0) -> np.ndarray:
    """Colour jitter, grayscale, blur and solarisation, each gated by its probability.

    ``which`` selects the per-view probabilities for blur and solarisation
    (0 for the first view, 1 for the second). Geometry is never touched.
    """
    out = view
    if rng.random() < cfg.jitter_p:
        out = color_jitter(out, cfg, rng)
    if rng.random() < cfg.gray_p:
        out = np.repeat(grayscale(out)[None], view.shape[0], axis=0)
    if rng.random() < cfg.blur_p[which]:
        scale = cfg.out_res / 224.0
        out = gaussian_blur(out, rng.uniform(*cfg.blur_sigma) * scale)
    if rng.random() < cfg.solarize_p[which]:
        out = solarize(out, cfg.solarize_threshold)
    return np.clip(out, 0.0, 1.0)


def make_views(image: np.ndarray, cfg: AugConfig, rng: np.random.Generator):
    """Full two-view pipeline: geometry first, then per-view photometric distortion."""
    (va, ra), (vb, rb) = sample_view_pair(image, cfg, rng)
    return (apply_photometric(va, rng, cfg, 0), ra), (apply_photometric(vb, rng, cfg, 1), rb)
