"""Run configuration: defaults, key-value file parsing, validation and digest."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..encoder import PYRAMID_LEVELS, EncoderConfig
from ..viewgen import AugConfig

VARIANTS = ("pixpro", "pixcontrast", "pixpro+instance")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainRunConfig:
    """Every knob of a pre-training run.

    Full-scale values for reference: 224 px views, batch 1024, 100-400
    epochs, base lr 1.0. The defaults below are the desk-scale stand-ins.
    """

    variant: str = "pixpro"
    threshold: float = 0.7
    tau: float = 0.3
    gamma: float = 2.0
    ppm_layers: int = 1
    ppm: str = "auto"
    alpha: float = 1.0
    tau_inst: float = 0.3
    levels: str = "c5"
    diag_mode: str = "max"
    out_res: int = 32
    epochs: int = 0
    max_steps: int = 500
    batch_size: int = 32
    lr_base: float = 1.0
    weight_decay: float = 1e-5
    trust_coeff: float = 0.016         # LARS itself defaults to 0.001; see README on desk scale
    lars_momentum: float = 0.9
    warmup_frac: float = 0.05
    m_base: float = 0.99
    seed: int = 0
    dataset: str = ""
    checkpoint_interval: int = 0
    stage_channels: str = "16,32,64"
    convs_per_stage: int = 2
    fpn_dim: int = 64
    proj_hidden: int = 256
    proj_dim: int = 64
    inst_hidden: int = 256
    inst_dim: int = 64
    scale_min: float = 0.08
    scale_max: float = 1.0
    photometric: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    # -- validation -----------------------------------------------------------
    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}, got {self.variant!r}")
        need(self.threshold > 0, "threshold must be > 0")
        need(self.tau > 0 and self.tau_inst > 0, "temperatures must be > 0")
        need(self.gamma > 0, "gamma must be > 0")
        need(self.ppm_layers >= 0, "ppm_layers must be >= 0")
        need(self.ppm in ("auto", "true", "false"), "ppm must be auto, true or false")
        need(self.alpha >= 0, "alpha must be >= 0")
        levels = self.level_tuple
        need(levels == ("c5",) or set(levels) <= set(PYRAMID_LEVELS),
             f"levels must be c5 or a subset of {','.join(PYRAMID_LEVELS)}")
        need(self.diag_mode in ("max", "mean", "first"), "diag_mode must be max, mean or first")
        need(self.epochs >= 0 and self.max_steps >= 0, "epochs and max_steps must be >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.variant != "pixpro+instance" or self.batch_size >= 2,
             "the instance branch needs batch_size >= 2")
        need(self.lr_base >= 0 and self.weight_decay >= 0, "lr_base and weight_decay must be >= 0")
        need(self.trust_coeff > 0, "trust_coeff must be > 0")
        need(0 <= self.lars_momentum < 1, "lars_momentum must be in [0, 1)")
        need(0 <= self.warmup_frac < 1, "warmup_frac must be in [0, 1)")
        need(0 <= self.m_base <= 1, "m_base must be in [0, 1]")
        need(self.checkpoint_interval >= 0, "checkpoint_interval must be >= 0")
        need(0 < self.scale_min <= self.scale_max <= 1, "need 0 < scale_min <= scale_max <= 1")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        try:
            chans = self.channel_tuple
        except ValueError:
            raise ConfigError(f"stage_channels must be comma-separated ints, got {self.stage_channels!r}")
        need(len(chans) >= 1 and all(c > 0 for c in chans), "stage_channels must be positive")
        need(levels == ("c5",) or len(chans) >= 3, "the pyramid needs at least three stages")
        stride = self.encoder_config().total_stride
        need(self.out_res % stride == 0, f"out_res {self.out_res} must be divisible by the total stride {stride}")

    # -- derived --------------------------------------------------------------
    @property
    def level_tuple(self) -> tuple[str, ...]:
        return tuple(s.strip() for s in self.levels.split(",") if s.strip())

    @property
    def channel_tuple(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.stage_channels.split(",") if s.strip())

    @property
    def use_ppm(self) -> bool:
        if self.ppm == "auto":
            return self.variant != "pixcontrast"
        return self.ppm == "true"

    @property
    def lr_effective(self) -> float:
        return effective_lr(self.lr_base, self.batch_size)

    def feat_res(self, level: str) -> int:
        return self.out_res // self.encoder_config().level_stride(level)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            stage_channels=self.channel_tuple,
            convs_per_stage=self.convs_per_stage,
            levels=self.level_tuple,
            fpn_dim=self.fpn_dim,
            proj_hidden=self.proj_hidden,
            proj_dim=self.proj_dim,
            ppm=self.use_ppm,
            ppm_layers=self.ppm_layers,
            gamma=self.gamma,
            instance=self.variant == "pixpro+instance",
            inst_hidden=self.inst_hidden,
            inst_dim=self.inst_dim,
        )

    def aug_config(self) -> AugConfig:
        aug = AugConfig(out_res=self.out_res, scale=(self.scale_min, self.scale_max))
        return aug if self.photometric else aug.photometric_off()

    def total_steps(self, n_images: int) -> int:
        if self.max_steps:
            return self.max_steps
        return self.epochs * steps_per_epoch(n_images, self.batch_size)

    # -- serialisation --------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **changes) -> TrainRunConfig:
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_dict(cls, values: dict) -> TrainRunConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {k: _coerce(known[k], v) for k, v in values.items()}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(f: dataclasses.Field, value):
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{f.name}: cannot interpret {value!r} as {kind}") from None


def effective_lr(lr_base: float, batch_size: int) -> float:
    """Linear scaling rule: ``lr_base * batch_size / 256``."""
    return lr_base * batch_size / 256.0


def steps_per_epoch(n_images: int, batch_size: int) -> int:
    return max(n_images // batch_size, 1)


def load_config(path: str | Path, overrides: dict | None = None) -> TrainRunConfig:
    """Parse a ``key = value`` file (``#`` comments allowed) into a validated config."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text()
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = dict(parser["run"])
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainRunConfig.from_dict(values)
