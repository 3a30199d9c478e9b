"""Exact geometry of augmented views and cross-view cell correspondence.

A view is described by a :class:`CropRecord`: the crop rectangle in original
image pixels, the square output resolution and whether the resized crop was
mirrored. Feature-map cells of a view are mapped back to original-image
coordinates (:func:`warp_grid`), pairwise distances are normalised by the
bin diagonal (:func:`distance_matrix`) and thresholded (:func:`assign`).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ASSIGNMENT_MAGIC = b"PXASN1"
DIAG_MODES = ("max", "mean", "first")


@dataclass(frozen=True)
class CropRecord:
    x0: float
    y0: float
    w: float
    h: float
    out_res: int
    flip: bool = False

    def validate(self, image_w: int, image_h: int) -> None:
        if self.w < 1 or self.h < 1:
            raise ValueError(f"crop must be at least 1x1 pixel, got {self.w}x{self.h}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > image_w or self.y0 + self.h > image_h:
            raise ValueError(f"crop {self} exceeds image bounds {image_w}x{image_h}")

    def to_source(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map continuous view coordinates (u right, v down, in output pixels) to the original image."""
        if self.flip:
            u = self.out_res - u
        return self.x0 + u * self.w / self.out_res, self.y0 + v * self.h / self.out_res

    def from_source(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inverse of :meth:`to_source`."""
        u = (x - self.x0) * self.out_res / self.w
        v = (y - self.y0) * self.out_res / self.h
        if self.flip:
            u = self.out_res - u
        return u, v

    def as_tuple(self) -> tuple:
        return (self.x0, self.y0, self.w, self.h, self.out_res, self.flip)


@dataclass
class DistanceMatrix:
    values: np.ndarray
    bin_diag_a: float
    bin_diag_b: float

    @property
    def T(self) -> DistanceMatrix:
        return DistanceMatrix(self.values.T, self.bin_diag_b, self.bin_diag_a)


@dataclass
class AssignmentMatrix:
    positives: np.ndarray
    threshold_used: float

    def positive_set(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.positives[i])

    def negative_set(self, i: int) -> np.ndarray:
        return np.flatnonzero(~self.positives[i])

    @property
    def n_pairs(self) -> int:
        return int(self.positives.sum())

    def transpose(self) -> AssignmentMatrix:
        return AssignmentMatrix(self.positives.T.copy(), self.threshold_used)


def warp_grid(rec: CropRecord, feat_res: int) -> np.ndarray:
    """Centres of a ``feat_res`` x ``feat_res`` cell grid in original-image pixels.

    Returns an array of shape [feat_res**2, 2] holding (x, y), cells in
    row-major order of the (possibly flipped) view.
    """
    idx = np.arange(feat_res, dtype=np.float64)
    col = feat_res - 1 - idx if rec.flip else idx
    xs = rec.x0 + (col + 0.5) * rec.w / feat_res
    ys = rec.y0 + (idx + 0.5) * rec.h / feat_res
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def bin_diagonal(rec: CropRecord, feat_res: int) -> float:
    return math.sqrt(rec.w * rec.h) / feat_res * math.sqrt(2.0)


def distance_matrix(coords_a: np.ndarray, coords_b: np.ndarray, rec_a: CropRecord, rec_b: CropRecord,
                    feat_res: int, diag_mode: str = "max") -> DistanceMatrix:
    """Pairwise cell-centre distances normalised by the feature-map bin diagonal.

    ``diag_mode`` picks the normaliser when the views' bins differ: the larger
    of the two diagonals (default), their mean, or the first view's.
    """
    da, db = bin_diagonal(rec_a, feat_res), bin_diagonal(rec_b, feat_res)
    if diag_mode == "max":
        norm = max(da, db)
    elif diag_mode == "mean":
        norm = 0.5 * (da + db)
    elif diag_mode == "first":
        norm = da
    else:
        raise ValueError(f"unknown diag_mode {diag_mode!r}; expected one of {DIAG_MODES}")
    diff = coords_a[:, None, :] - coords_b[None, :, :]
    raw = np.sqrt((diff ** 2).sum(axis=-1))
    return DistanceMatrix(raw / norm, da, db)


def assign(dist: DistanceMatrix, threshold: float = 0.7) -> AssignmentMatrix:
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return AssignmentMatrix(dist.values <= threshold, float(threshold))


def assignment_for_pair(rec_a: CropRecord, rec_b: CropRecord, feat_res: int, threshold: float = 0.7,
                        diag_mode: str = "max") -> AssignmentMatrix:
    dist = distance_matrix(warp_grid(rec_a, feat_res), warp_grid(rec_b, feat_res), rec_a, rec_b,
                           feat_res, diag_mode)
    return assign(dist, threshold)


def overlap_check(rec_a: CropRecord, rec_b: CropRecord) -> bool:
    """True iff the two crop rectangles intersect with positive area."""
    iw = min(rec_a.x0 + rec_a.w, rec_b.x0 + rec_b.w) - max(rec_a.x0, rec_b.x0)
    ih = min(rec_a.y0 + rec_a.h, rec_b.y0 + rec_b.h) - max(rec_a.y0, rec_b.y0)
    return iw > 0 and ih > 0


def write_assignment(path: str | Path, assignment: AssignmentMatrix | np.ndarray) -> None:
    """Write a binary matrix as ``PXASN1`` + two little-endian uint32 dims + row-major uint8 bytes."""
    pos = assignment.positives if isinstance(assignment, AssignmentMatrix) else np.asarray(assignment)
    rows, cols = pos.shape
    with open(path, "wb") as fh:
        fh.write(ASSIGNMENT_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(pos, dtype=np.uint8).tobytes())


def read_assignment(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:6] != ASSIGNMENT_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:6]!r}, expected {ASSIGNMENT_MAGIC!r}")
    rows, cols = struct.unpack_from("<II", blob, 6)
    body = blob[14:]
    if len(body) != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols).astype(bool)
