"""Evaluation probes: linear classification, dense correspondence retrieval, collapse check."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..encoder import PixProModel
from ..numerics import Tensor, no_grad
from ..trainer.config import TrainRunConfig
from ..trainer.loop import embedding_std, encode_images, load_model
from ..viewgen import AugConfig, assignment_for_pair, make_views, overlap_check

COLLAPSE_THRESHOLD = 0.01


@dataclass
class EvalReport:
    metric: str
    value: float
    config_digest: str
    checkpoint_digest: str
    seeds: list[int] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- linear probe ---------------------------------------------------------------

def pooled_features(model: PixProModel, images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Spatially averaged C5 features from the frozen online backbone in eval mode."""
    c5 = encode_images(model, images, dtype=dtype)["c5"]
    return c5.mean(axis=(2, 3)).astype(np.float64)


def stratified_split(labels: np.ndarray, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9B0BE]))
    train, test = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_test = int(round(test_frac * len(idx)))
        if len(idx) > 1:
            n_test = min(max(n_test, 1), len(idx) - 1)
        else:
            n_test = 0
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def fit_linear_classifier(x: np.ndarray, y: np.ndarray, n_classes: int, epochs: int = 100,
                          lr: float = 0.5, momentum: float = 0.9, weight_decay: float = 1e-4):
    """Softmax regression by full-batch gradient descent with momentum and a cosine lr."""
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    onehot = np.eye(n_classes)[y]
    for epoch in range(epochs):
        step_lr = lr * 0.5 * (1 + math.cos(math.pi * epoch / epochs))
        logits = x @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        gw = x.T @ g + weight_decay * w
        gb = g.sum(axis=0)
        vw = momentum * vw + gw
        vb = momentum * vb + gb
        w -= step_lr * vw
        b -= step_lr * vb
    return w, b


def probe_features(feats: np.ndarray, labels: np.ndarray, epochs: int = 100, seed: int = 0,
                   test_frac: float = 0.25) -> float:
    """Held-out top-1 of a linear classifier on fixed features."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) == 1:
        return 1.0
    train, test = stratified_split(labels, test_frac, seed)
    missing = set(np.unique(labels[test]).tolist()) - set(np.unique(labels[train]).tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} are absent from the training split")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[c] for c in labels])
    mu = feats[train].mean(axis=0)
    sd = feats[train].std(axis=0) + 1e-6
    x = (feats - mu) / sd
    w, b = fit_linear_classifier(x[train], y[train], len(classes), epochs)
    pred = np.argmax(x[test] @ w + b, axis=1)
    return float(np.mean(pred == y[test]))


def linear_probe(model: PixProModel, images: np.ndarray, labels: np.ndarray, epochs: int = 100,
                 seed: int = 0, test_frac: float = 0.25) -> float:
    return probe_features(pooled_features(model, images), labels, epochs, seed, test_frac)


# -- dense correspondence ----------------------------------------------------------

@dataclass
class CorrespondenceResult:
    accuracy: float
    chance: float
    cells: int
    pairs: int


def retrieval_hits(feat_a: np.ndarray, feat_b: np.ndarray, positives: np.ndarray):
    """Nearest-cosine retrieval from A cells [HW_a, d] into B cells [HW_b, d].

    Only A cells with at least one positive are scored. Returns
    (hits, chance) per scored cell, where chance is the positive fraction of
    that row.
    """
    na = feat_a / np.maximum(np.linalg.norm(feat_a, axis=1, keepdims=True), 1e-12)
    nb = feat_b / np.maximum(np.linalg.norm(feat_b, axis=1, keepdims=True), 1e-12)
    sim = na @ nb.T
    rows = np.flatnonzero(positives.any(axis=1))
    best = np.argmax(sim[rows], axis=1)
    hits = positives[rows, best]
    chance = positives[rows].sum(axis=1) / positives.shape[1]
    return hits, chance


def sample_overlapping_views(image: np.ndarray, aug: AugConfig, rng: np.random.Generator, max_retries: int = 20):
    for _ in range(max_retries):
        (a, ra), (b, rb) = make_views(image, aug, rng)
        if overlap_check(ra, rb):
            return a, ra, b, rb
    return None


def correspondence_eval(model: PixProModel, images: np.ndarray, n_pairs: int, seed: int,
                        cfg: TrainRunConfig | None = None, threshold: float = 0.7,
                        max_retries: int = 20, photometric: bool = False,
                        features: str = "proj") -> CorrespondenceResult:
    """Fraction of overlap cells whose nearest-cosine cell in the other view is a true positive."""
    cfg = cfg or TrainRunConfig()
    aug = cfg.aug_config()
    if not photometric:
        aug = aug.photometric_off()
    level = cfg.level_tuple[0]
    fr = cfg.feat_res(level)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DE]))
    views_a, views_b, masks = [], [], []
    for i in range(n_pairs):
        got = sample_overlapping_views(images[i % len(images)], aug, rng, max_retries)
        if got is None:
            continue
        a, ra, b, rb = got
        views_a.append(a)
        views_b.append(b)
        masks.append(assignment_for_pair(ra, rb, fr, threshold, cfg.diag_mode).positives)
    if not views_a:
        raise ValueError(f"no overlapping view pair found after {max_retries} retries per image")
    fa = encode_images(model, np.stack(views_a))[features]
    fb = encode_images(model, np.stack(views_b))[features]
    hits, chance = [], []
    for k, pos in enumerate(masks):
        d = fa.shape[1]
        h, c = retrieval_hits(fa[k].reshape(d, -1).T, fb[k].reshape(d, -1).T, pos)
        hits.append(h)
        chance.append(c)
    hits = np.concatenate(hits)
    chance = np.concatenate(chance)
    if hits.size == 0:
        raise ValueError("no cell with a positive partner in any sampled pair")
    return CorrespondenceResult(float(hits.mean()), float(chance.mean()), int(hits.size), len(masks))


# -- collapse ---------------------------------------------------------------------

@dataclass
class CollapseReport:
    per_channel_std: np.ndarray
    mean_std: float
    collapsed: bool


def collapse_stats(embeddings: np.ndarray, threshold: float = COLLAPSE_THRESHOLD) -> CollapseReport:
    """Per-channel std of unit-normalised cell embeddings [N, d, h, w] (or [M, d])."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim == 2:
        emb = emb[:, :, None, None]
    d = emb.shape[1]
    cells = np.moveaxis(emb, 1, -1).reshape(-1, d)
    cells = cells / np.maximum(np.linalg.norm(cells, axis=1, keepdims=True), 1e-12)
    std = cells.std(axis=0)
    mean = float(std.mean())
    return CollapseReport(std, mean, mean < threshold)


def collapse_diagnostic(model: PixProModel, images: np.ndarray, threshold: float = COLLAPSE_THRESHOLD,
                        training_mode: bool = False) -> CollapseReport:
    if len(images) < 32:
        raise ValueError(f"collapse diagnostic needs at least 32 images, got {len(images)}")
    if training_mode:
        model.online.train()
        with no_grad():
            maps = next(iter(model.online(Tensor(images, dtype=np.float32)).maps.values())).data
    else:
        maps = encode_images(model, images)["proj"]
    return collapse_stats(maps, threshold)


def evaluate_checkpoint(path: str | Path, images: np.ndarray, labels: np.ndarray | None = None,
                        n_pairs: int = 256, seed: int = 0) -> list[EvalReport]:
    """All three probes on one checkpoint, as reports."""
    model, cfg, _ = load_model(path)
    cdig, kdig = cfg.digest(), file_digest(path)
    reports = []
    if labels is not None:
        acc = linear_probe(model, images, labels, seed=seed)
        reports.append(EvalReport("linear_probe_top1", acc, cdig, kdig, [seed]))
    corr = correspondence_eval(model, images, n_pairs, seed, cfg)
    reports.append(EvalReport("correspondence_acc", corr.accuracy, cdig, kdig, [seed],
                              {"chance": corr.chance, "cells": corr.cells, "pairs": corr.pairs}))
    col = collapse_diagnostic(model, images)
    reports.append(EvalReport("embed_std_mean", col.mean_std, cdig, kdig, [seed], {"collapsed": col.collapsed}))
    return reports


__all__ = ["EvalReport", "CorrespondenceResult", "CollapseReport", "linear_probe", "probe_features",
           "correspondence_eval", "retrieval_hits", "collapse_stats", "collapse_diagnostic",
           "evaluate_checkpoint", "file_digest", "embedding_std", "COLLAPSE_THRESHOLD"]
