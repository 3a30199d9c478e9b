"""Image datasets described by a line-delimited JSON manifest.

Each manifest line maps an id to an image file and, optionally, a dense
label map and an image-level label::

    {"id": 0, "image": "images/000000.png", "labels": "labels/000000.png", "label": 2}

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .viewgen import load_image, load_label_map

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class Dataset:
    images: np.ndarray                 # [N, 3, H, W] float32 in [0, 1]
    labels: np.ndarray | None = None   # [N] image-level labels
    label_maps: np.ndarray | None = None  # [N, H, W] dense labels
    ids: list | None = None

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            None if self.labels is None else self.labels[index],
            None if self.label_maps is None else self.label_maps[index],
            None if self.ids is None else [self.ids[i] for i in index],
        )


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path / MANIFEST_NAME if path.is_dir() else path


def read_manifest(path: str | Path) -> list[dict]:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    with open(mpath) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(path: str | Path, with_label_maps: bool = True) -> Dataset:
    mpath = manifest_path(path)
    entries = read_manifest(mpath)
    if not entries:
        raise ValueError(f"dataset {mpath} is empty")
    root = mpath.parent
    images = np.stack([load_image(root / e["image"]) for e in entries]).astype(np.float32)
    labels = None
    if all("label" in e for e in entries):
        labels = np.array([int(e["label"]) for e in entries], dtype=np.int64)
    maps = None
    if with_label_maps and all("labels" in e for e in entries):
        maps = np.stack([load_label_map(root / e["labels"]) for e in entries])
    return Dataset(images, labels, maps, [e.get("id", i) for i, e in enumerate(entries)])
