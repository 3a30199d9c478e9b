"""Online and momentum encoders, the pixel propagation module and EMA updates.

The backbone is a plain staged conv net standing in for a ResNet: each stage
opens with a stride-2 3x3 conv, and the last stage output plays the role of
C5. An optional top-down pyramid yields P3-P6 analogues at strides 2, 4, 8
and 16 of the input (for the default three stages).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import BatchNorm, Conv2d, Linear, Module, Tensor, no_grad, ops

PYRAMID_LEVELS = ("p3", "p4", "p5", "p6")


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (16, 32, 64)
    convs_per_stage: int = 2
    levels: tuple[str, ...] = ("c5",)
    fpn_dim: int = 64
    proj_hidden: int = 256
    proj_dim: int = 64
    ppm: bool = True
    ppm_layers: int = 1
    gamma: float = 2.0
    instance: bool = False
    inst_hidden: int = 256
    inst_dim: int = 64

    def __post_init__(self):
        levels = tuple(self.levels)
        if not levels:
            raise ValueError("at least one feature level is required")
        if levels != ("c5",) and not set(levels) <= set(PYRAMID_LEVELS):
            raise ValueError(f"levels must be ('c5',) or a subset of {PYRAMID_LEVELS}, got {levels}")
        if len(self.stage_channels) < 3 and levels != ("c5",):
            raise ValueError("the pyramid needs at least three backbone stages")
        if self.ppm_layers < 0:
            raise ValueError("ppm_layers must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @property
    def uses_pyramid(self) -> bool:
        return self.levels != ("c5",)

    def level_stride(self, level: str) -> int:
        n = len(self.stage_channels)
        if level == "c5":
            return 2 ** n
        # p3..p5 sit on the last three stages, p6 one octave above
        return {"p3": 2 ** (n - 2), "p4": 2 ** (n - 1), "p5": 2 ** n, "p6": 2 ** (n + 1)}[level]

    @property
    def total_stride(self) -> int:
        return max(self.level_stride(lv) for lv in self.levels + ("c5",))


class Stage(Module):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int, rng, dtype):
        self.convs = [Conv2d(in_ch if i == 0 else out_ch, out_ch, 3, rng, stride=2 if i == 0 else 1,
                             pad=1, dtype=dtype) for i in range(n_convs)]
        self.bns = [BatchNorm(out_ch, dtype=dtype) for _ in range(n_convs)]

    def forward(self, x: Tensor) -> Tensor:
        for conv, bn in zip(self.convs, self.bns):
            x = ops.relu(bn(conv(x)))
        return x


class Backbone(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        chans = (cfg.in_channels,) + tuple(cfg.stage_channels)
        self.stages = [Stage(chans[i], chans[i + 1], cfg.convs_per_stage, rng, dtype)
                       for i in range(len(cfg.stage_channels))]
        if cfg.uses_pyramid:
            self.laterals = [Conv2d(c, cfg.fpn_dim, 1, rng, bias=True, dtype=dtype)
                             for c in cfg.stage_channels[-3:]]

    def forward(self, images: Tensor) -> dict[str, Tensor]:
        """Feature maps keyed by level name; ``c5`` is always present."""
        _, _, h, w = images.shape
        s = self.cfg.total_stride
        if h % s or w % s:
            raise ValueError(f"input {h}x{w} is not divisible by the total stride {s}")
        feats = []
        x = images
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        out = {"c5": feats[-1]}
        if self.cfg.uses_pyramid:
            c3, c4, c5 = feats[-3:]
            p5 = self.laterals[2](c5)
            p4 = self.laterals[1](c4) + ops.upsample_nearest(p5, 2)
            p3 = self.laterals[0](c3) + ops.upsample_nearest(p4, 2)
            p6 = p5[:, :, ::2, ::2]
            pyramid = {"p3": p3, "p4": p4, "p5": p5, "p6": p6}
            for lv in self.cfg.levels:
                out[lv] = pyramid[lv]
        return out


class ProjectionHead(Module):
    """Two 1x1 convs with BN + ReLU in between; cells never mix."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int, rng, dtype=np.float32):
        self.conv1 = Conv2d(in_ch, hidden, 1, rng, dtype=dtype)
        self.bn = BatchNorm(hidden, dtype=dtype)
        self.conv2 = Conv2d(hidden, out_ch, 1, rng, bias=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.bn(self.conv1(x))))


class InstanceHead(Module):
    """MLP on globally pooled C5 features for the instance-level branch."""

    def __init__(self, in_ch: int, hidden: int, out_dim: int, rng, dtype=np.float32):
        self.fc1 = Linear(in_ch, hidden, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm(hidden, dtype=dtype)
        self.fc2 = Linear(hidden, out_dim, rng, dtype=dtype)

    def forward(self, c5: Tensor) -> Tensor:
        pooled = ops.mean(c5, axis=(2, 3))
        return self.fc2(ops.relu(self.bn(self.fc1(pooled))))


def similarity(x_i, x_j, gamma: float) -> Tensor:
    """``max(cos(x_i, x_j), 0) ** gamma`` for two feature vectors."""
    xi = x_i if isinstance(x_i, Tensor) else Tensor(x_i)
    xj = x_j if isinstance(x_j, Tensor) else Tensor(x_j)
    cos = ops.cosine_similarity_matrix(xi.reshape(1, -1), xj.reshape(1, -1))
    return ops.clamped_power(cos, gamma).reshape(())


def propagate(x: Tensor, transformed: Tensor, gamma: float) -> Tensor:
    """``y_i = sum_j s(x_i, x_j) g(x_j)`` over all cells of each image's map.

    ``x`` and ``transformed`` are [N, d, h, w]; the weights are not
    renormalised.
    """
    n, d, h, w = x.shape
    cells = ops.transpose(x.reshape(n, d, h * w), (0, 2, 1))
    s = ops.clamped_power(ops.cosine_similarity_matrix(cells, cells), gamma)
    g = transformed.reshape(n, transformed.shape[1], h * w)
    y = ops.matmul(g, ops.transpose_last(s))
    return y.reshape(n, transformed.shape[1], h, w)


class PixelPropagation(Module):
    """Pixel propagation module with a transform g of ``layers`` 1x1 convs.

    With ``enabled=False`` the module reduces to ``g`` alone, which gives the
    "no propagation" ablations (``layers=1``: a single linear layer,
    ``layers=0``: identity).
    """

    def __init__(self, dim: int, layers: int, gamma: float, rng: np.random.Generator,
                 enabled: bool = True, dtype=np.float32, init_noise: float = 0.01):
        self.gamma = gamma
        self.enabled = enabled
        self.layers = []
        for i in range(layers):
            conv = Conv2d(dim, dim, 1, rng, bias=(i == layers - 1), dtype=dtype)
            eye = np.eye(dim) + init_noise * rng.standard_normal((dim, dim))
            conv.weight.data = eye.reshape(dim, dim, 1, 1).astype(dtype)
            self.layers.append(conv)
        self.bns = [BatchNorm(dim, dtype=dtype) for _ in range(max(layers - 1, 0))]

    def transform(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i < len(self.bns):
                x = ops.relu(self.bns[i](x))
        return x

    def forward(self, x: Tensor) -> Tensor:
        g = self.transform(x)
        if not self.enabled:
            return g
        return propagate(x, g, self.gamma)


def ppm_forward(embedding: Tensor, ppm: PixelPropagation, gamma: float | None = None) -> Tensor:
    if gamma is None:
        return ppm(embedding)
    return propagate(embedding, ppm.transform(embedding), gamma)


@dataclass
class EncoderOutput:
    maps: dict[str, Tensor]
    c5: Tensor
    instance: Tensor | None = None
    backbone: dict[str, Tensor] = field(default_factory=dict)


class Encoder(Module):
    """Backbone + pixel projection head (+ optional instance head)."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng, dtype)
        in_ch = cfg.fpn_dim if cfg.uses_pyramid else cfg.stage_channels[-1]
        self.proj = ProjectionHead(in_ch, cfg.proj_hidden, cfg.proj_dim, rng, dtype)
        if cfg.instance:
            self.inst = InstanceHead(cfg.stage_channels[-1], cfg.inst_hidden, cfg.inst_dim, rng, dtype)

    def forward(self, images: Tensor) -> EncoderOutput:
        feats = self.backbone(images)
        maps = {lv: self.proj(feats[lv]) for lv in self.cfg.levels}
        inst = self.inst(feats["c5"]) if self.cfg.instance else None
        return EncoderOutput(maps, feats["c5"], inst, feats)


def backbone_forward(images: Tensor, encoder: Encoder, training: bool = True) -> dict[str, Tensor]:
    encoder.backbone.train(training)
    return encoder.backbone(images)


def projection_forward(feat: Tensor, encoder: Encoder, training: bool = True) -> Tensor:
    encoder.proj.train(training)
    return encoder.proj(feat)


class PixProModel(Module):
    """Online encoder + propagation module, and a gradient-free momentum copy of the encoder."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.online = Encoder(cfg, rng, dtype)
        self.ppm = PixelPropagation(cfg.proj_dim, cfg.ppm_layers, cfg.gamma, rng, enabled=cfg.ppm, dtype=dtype)
        self.target = self.online.clone().freeze()

    def trainable(self) -> list[tuple[str, Tensor]]:
        named = list(self.online.named_parameters("online.")) + list(self.ppm.named_parameters("ppm."))
        return [(n, p) for n, p in named if p.requires_grad]

    def encode_target(self, images: Tensor) -> EncoderOutput:
        with no_grad():
            return self.target(images)


def momentum_update(online: Module, target: Module, m: float) -> None:
    """``target <- m * target + (1 - m) * online`` for every parameter, in place."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    on = list(online.named_parameters())
    tg = list(target.named_parameters())
    if [n for n, _ in on] != [n for n, _ in tg]:
        raise ValueError("online and target parameter names differ")
    for (name, p), (_, q) in zip(on, tg):
        if p.shape != q.shape:
            raise ValueError(f"{name}: online shape {p.shape} != target shape {q.shape}")
        q.data = (m * q.data + (1.0 - m) * p.data).astype(q.dtype)


def momentum_schedule(step: int, total_steps: int, m_base: float = 0.99) -> float:
    """Cosine ramp from ``m_base`` at step 0 to exactly 1 at ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step == 0:
        return m_base
    if step == total_steps:
        return 1.0
    return 1.0 - (1.0 - m_base) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0
