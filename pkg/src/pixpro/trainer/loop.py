"""Pre-training loop: view sampling, encoding, loss, LARS step, momentum update."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import Dataset, load_dataset
from ..encoder import PixProModel, momentum_schedule, momentum_update
from ..numerics import NonFiniteError, Tensor, no_grad
from ..objectives import (
    combined_loss,
    instance_loss,
    multiscale_pix_contrast_loss,
    multiscale_pixpro_loss,
)
from ..viewgen import assignment_for_pair, make_views, overlap_check, rng_stream
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainRunConfig, steps_per_epoch
from .optim import LARS, NonFiniteGradientError, cosine_lr

log = logging.getLogger(__name__)

LATEST = "latest.ckpt"
FINAL = "final.ckpt"
METRICS = "metrics.jsonl"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainRunConfig
    model: PixProModel
    optimizer: LARS
    step: int = 0

    @classmethod
    def initial(cls, cfg: TrainRunConfig) -> TrainState:
        model = PixProModel(cfg.encoder_config(), seed=cfg.seed, dtype=np.dtype(cfg.dtype))
        opt = LARS(model.trainable(), cfg.weight_decay, cfg.lars_momentum, cfg.trust_coeff)
        return cls(cfg, model, opt, 0)

    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters():
            tensors[name] = p.data
        for name, b in self.model.named_buffers():
            tensors[name] = b
        for name, buf in sorted(self.optimizer.buffers.items()):
            tensors["optim." + name] = buf
        rng = {"scheme": "keyed(seed,epoch,index)", "seed": self.config.seed}
        return Checkpoint(self.config.to_dict(), self.step, tensors, rng)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> TrainState:
        cfg = TrainRunConfig.from_dict(ckpt.config)
        state = cls.initial(cfg)
        params = dict(state.model.named_parameters())
        buffers = dict(state.model.named_buffers())
        expected = set(params) | set(buffers)
        stored = {k for k in ckpt.tensors if not k.startswith("optim.")}
        if stored != expected:
            missing, extra = sorted(expected - stored), sorted(stored - expected)
            raise CheckpointError(f"checkpoint tensors do not match the model (missing={missing[:3]}, extra={extra[:3]})")
        for name, p in params.items():
            arr = ckpt.tensors[name]
            if arr.shape != p.shape:
                raise CheckpointError(f"{name}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, b in buffers.items():
            b[...] = ckpt.tensors[name]
        state.optimizer.buffers = {k[len("optim."):]: v.copy() for k, v in ckpt.tensors.items()
                                   if k.startswith("optim.")}
        state.step = ckpt.step
        return state


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x5EED])).permutation(n)


def batch_indices(cfg: TrainRunConfig, step: int, n: int) -> tuple[int, np.ndarray]:
    spe = steps_per_epoch(n, cfg.batch_size)
    epoch, pos = divmod(step, spe)
    order = epoch_order(cfg.seed, epoch, n)
    if cfg.batch_size > n:
        return epoch, order
    return epoch, order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]


def embedding_std(x: np.ndarray) -> float:
    """Mean over channels of the std of unit-normalised cell embeddings [N, d, h, w]."""
    d = x.shape[1]
    cells = np.moveaxis(x, 1, -1).reshape(-1, d).astype(np.float64)
    cells = cells / np.maximum(np.linalg.norm(cells, axis=1, keepdims=True), 1e-12)
    return float(cells.std(axis=0).mean())


def build_views(images: np.ndarray, indices: np.ndarray, cfg: TrainRunConfig, epoch: int, seed: int | None = None):
    aug = cfg.aug_config()
    seed = cfg.seed if seed is None else seed
    va, vb, recs = [], [], []
    for idx in indices:
        (a, ra), (b, rb) = make_views(images[idx], aug, rng_stream(seed, epoch, int(idx)))
        va.append(a)
        vb.append(b)
        recs.append((ra, rb))
    return np.stack(va), np.stack(vb), recs


def level_masks(cfg: TrainRunConfig, recs, overlaps) -> dict[str, np.ndarray]:
    masks = {}
    for lv in cfg.level_tuple:
        fr = cfg.feat_res(lv)
        per = []
        for (ra, rb), ok in zip(recs, overlaps):
            if ok:
                per.append(assignment_for_pair(ra, rb, fr, cfg.threshold, cfg.diag_mode).positives)
            else:
                per.append(np.zeros((fr * fr, fr * fr), dtype=bool))
        masks[lv] = np.stack(per)
    return masks


def compute_loss(state: TrainState, xa: np.ndarray, xb: np.ndarray, recs, overlaps):
    cfg = state.config
    model = state.model
    dtype = np.dtype(cfg.dtype)
    ta, tb = Tensor(xa, dtype=dtype), Tensor(xb, dtype=dtype)
    model.online.train()
    model.ppm.train()
    model.target.train()
    on_a, on_b = model.online(ta), model.online(tb)
    tg_a, tg_b = model.encode_target(ta), model.encode_target(tb)
    masks = level_masks(cfg, recs, overlaps)
    skipped = int(np.sum(~np.asarray(overlaps)))
    levels = []
    for lv in cfg.level_tuple:
        xa_, xb_ = on_a.maps[lv], on_b.maps[lv]
        if cfg.variant != "pixcontrast" or cfg.use_ppm:
            xa_, xb_ = model.ppm(xa_), model.ppm(xb_)
        levels.append((xa_, xb_, tg_a.maps[lv], tg_b.maps[lv], masks[lv]))
    if cfg.variant == "pixcontrast":
        pix = multiscale_pix_contrast_loss(levels, cfg.tau)
    else:
        pix = multiscale_pixpro_loss(levels)
    inst = None
    if cfg.variant == "pixpro+instance" and not pix.skipped:
        inst = instance_loss(on_a.instance, on_b.instance, tg_a.instance, tg_b.instance, cfg.tau_inst)
    breakdown = combined_loss(pix, inst, cfg.alpha, skipped, cfg.variant)
    embed_std = embedding_std(on_a.maps[cfg.level_tuple[0]].data)
    return breakdown, embed_std


def train_step(state: TrainState, images: np.ndarray, indices: np.ndarray, epoch: int, total_steps: int) -> dict:
    """One optimisation step on the images at ``indices``; returns the metrics record."""
    cfg = state.config
    step = state.step
    warmup = int(round(cfg.warmup_frac * total_steps))
    lr = cosine_lr(step, total_steps, cfg.lr_effective, warmup)
    m = momentum_schedule(step, total_steps, cfg.m_base)

    xa, xb, recs = build_views(images, indices, cfg, epoch)
    overlaps = [overlap_check(ra, rb) for ra, rb in recs]
    record = {"step": step, "epoch": epoch, "lr": lr, "m": m, "loss_name": cfg.variant}
    if not any(overlaps):
        record.update(loss_total=None, loss_pix=None, loss_inst=None, pairs_used=0,
                      pairs_skipped=len(indices), skipped=True, embed_std_mean=None)
        state.step += 1
        return record

    try:
        breakdown, embed_std = compute_loss(state, xa, xb, recs, overlaps)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value at step {step} ({exc}); batch indices {indices.tolist()}") from exc
    record.update(pairs_used=breakdown.pairs_used, pairs_skipped=breakdown.pairs_skipped,
                  embed_std_mean=embed_std)
    if breakdown.skipped:
        record.update(loss_total=None, loss_pix=None, loss_inst=None, skipped=True)
        state.step += 1
        return record

    total = breakdown.total
    if not np.isfinite(total.item()):
        raise TrainingError(f"non-finite loss at step {step}; batch indices {indices.tolist()}")
    state.optimizer.zero_grad()
    total.backward()
    try:
        state.optimizer.step(lr)
    except NonFiniteGradientError as exc:
        raise TrainingError(f"{exc} at step {step}; batch indices {indices.tolist()}") from exc
    momentum_update(state.model.online, state.model.target, m)
    record.update(loss_total=total.item(), loss_pix=breakdown.pix_component,
                  loss_inst=breakdown.instance_component, skipped=False)
    state.step += 1
    return record


@dataclass
class RunResult:
    state: TrainState
    checkpoint: Path
    metrics: Path


def _header(cfg: TrainRunConfig) -> str:
    feat = {lv: cfg.feat_res(lv) for lv in cfg.level_tuple}
    return json.dumps({"type": "header", "config": cfg.to_dict(), "config_digest": cfg.digest(),
                       "feat_res": feat, "lr_effective": cfg.lr_effective}, sort_keys=True)


def _truncate_metrics(path: Path, upto_step: int) -> None:
    lines = path.read_text().splitlines(keepends=True) if path.exists() else []
    kept = [ln for ln in lines if json.loads(ln).get("type") == "header" or json.loads(ln)["step"] < upto_step]
    path.write_text("".join(kept))


def run_pretrain(cfg: TrainRunConfig, out_dir: str | Path, dataset: Dataset | None = None,
                 resume: bool = True, stop_at: int | None = None,
                 step_callback=None) -> RunResult:
    """Run (or resume) pre-training; writes metrics.jsonl, latest.ckpt and final.ckpt in ``out_dir``.

    ``stop_at`` halts after that many total steps, leaving a resumable
    checkpoint, which is how interruption is exercised in tests.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        if not cfg.dataset:
            raise ValueError("no dataset given")
        dataset = load_dataset(cfg.dataset, with_label_maps=False)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    images = dataset.images
    n = len(images)
    total = cfg.total_steps(n)

    metrics_path = out / METRICS
    latest = out / LATEST
    if resume and latest.exists():
        ckpt = load_checkpoint(latest)
        if ckpt.config_digest != cfg.digest():
            raise CheckpointError(f"{latest} was written by a different config")
        state = TrainState.from_checkpoint(ckpt)
        _truncate_metrics(metrics_path, state.step)
        log.info("resumed from step %d", state.step)
    else:
        state = TrainState.initial(cfg)
        metrics_path.write_text(_header(cfg) + "\n")

    end = total if stop_at is None else min(stop_at, total)
    with open(metrics_path, "a") as fh:
        while state.step < end:
            epoch, idx = batch_indices(cfg, state.step, n)
            record = train_step(state, images, idx, epoch, total)
            record["type"] = "step"
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            if step_callback is not None:
                step_callback(state, record)
            if cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(latest, state.to_checkpoint())
    save_checkpoint(latest, state.to_checkpoint())
    final = latest
    if state.step >= total:
        final = out / FINAL
        save_checkpoint(final, state.to_checkpoint())
    return RunResult(state, final, metrics_path)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return [r for r in rows if r.get("type") == "step"]


def load_model(path: str | Path) -> tuple[PixProModel, TrainRunConfig, Checkpoint]:
    ckpt = load_checkpoint(path)
    state = TrainState.from_checkpoint(ckpt)
    return state.model, state.config, ckpt


def encode_images(model: PixProModel, images: np.ndarray, batch: int = 64, dtype=np.float32) -> dict[str, np.ndarray]:
    """Eval-mode online encoding.

    Returns ``c5`` (last backbone stage), ``proj`` (projected map of the first
    training level) and ``level`` (backbone map of that level, before the head).
    """
    model.online.eval()
    level = model.cfg.levels[0]
    out: dict[str, list] = {"c5": [], "proj": [], "level": []}
    with no_grad():
        for i in range(0, len(images), batch):
            enc = model.online(Tensor(images[i:i + batch], dtype=dtype))
            out["c5"].append(enc.c5.data)
            out["proj"].append(enc.maps[level].data)
            out["level"].append(enc.backbone[level].data)
    model.online.train()
    return {k: np.concatenate(v) for k, v in out.items()}
