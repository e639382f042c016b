"""Configuration objects for the model, training loop, and evaluation stack.

All configs are plain dataclasses with JSON round-trip helpers so CLI runs can
echo their effective configuration into manifests and reports.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .geometry import RadarGrid

DEFAULT_CLASSES = ("pedestrian", "cyclist", "car")


class ConfigError(ValueError):
    """Raised when a configuration violates a structural invariant."""


@dataclass
class ModelConfig:
    num_frames: int = 16
    num_chirps: int = 4
    height: int = 128
    width: int = 128
    num_classes: int = 3
    embed_channels: int = 16
    stage_channels: tuple[int, ...] = (48, 96, 192, 384)
    stage_depths: tuple[int, ...] = (2, 2, 2, 1)
    stage_mixers: tuple[str, ...] = ("sepconv", "sepconv", "sepconv", "attention")
    decoder_depths: tuple[int, ...] | None = None
    decoder_mixers: tuple[str, ...] | None = None
    mlp_ratio: float = 4.0
    attn_heads: int = 8
    dw_kernel: tuple[int, int, int] = (3, 3, 3)
    embed_kind: str = "conv"    # "conv" | "pool" (pooling+linear ablation)
    merge_kind: str = "rearrange"  # "rearrange" | "conv" (merge-by-convolution ablation)
    # background prior for the confidence head: sigmoid(-3) ~= 0.047, so maps
    # start near empty instead of at 0.5 (removes the background-collapse
    # attractor on short desk-scale runs)
    head_bias_init: float = -3.0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        self.stage_mixers = tuple(self.stage_mixers)
        self.dw_kernel = tuple(self.dw_kernel)
        if self.decoder_depths is not None:
            self.decoder_depths = tuple(self.decoder_depths)
        if self.decoder_mixers is not None:
            self.decoder_mixers = tuple(self.decoder_mixers)

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    def resolved_decoder_depths(self) -> tuple[int, ...]:
        """Decoder stage depths, deepest stage first (widths c_{S-1}..c_1)."""
        if self.decoder_depths is not None:
            return self.decoder_depths
        return tuple(reversed(self.stage_depths[:-1]))

    def resolved_decoder_mixers(self) -> tuple[str, ...]:
        if self.decoder_mixers is not None:
            return self.decoder_mixers
        return ("sepconv",) * (self.num_stages - 1)

    def validate(self) -> "ModelConfig":
        errors = []
        s = self.num_stages
        if not (len(self.stage_depths) == len(self.stage_mixers) == s):
            errors.append(
                f"stage_channels/stage_depths/stage_mixers lengths differ: "
                f"{s}/{len(self.stage_depths)}/{len(self.stage_mixers)}"
            )
        if s < 2:
            errors.append(f"need at least 2 stages, got {s}")
        for name, value in (("num_frames", self.num_frames),):
            if value % 2 != 0 or value < 2:
                errors.append(f"{name}={value} must be a positive multiple of 2")
        for name, value in (("height", self.height), ("width", self.width)):
            if value % (1 << s) != 0 or value <= 0:
                errors.append(f"{name}={value} must be divisible by 2^{s}={1 << s}")
        if self.num_chirps < 1:
            errors.append(f"num_chirps={self.num_chirps} must be >= 1")
        for mixer in self.stage_mixers + self.resolved_decoder_mixers():
            if mixer not in ("sepconv", "attention"):
                errors.append(f"unknown mixer kind {mixer!r}")
        for i, (mixer, ch) in enumerate(zip(self.stage_mixers, self.stage_channels)):
            if mixer == "attention" and ch % self.attn_heads != 0:
                errors.append(
                    f"stage {i}: channels {ch} not divisible by attn_heads {self.attn_heads}"
                )
        dec_widths = tuple(reversed(self.stage_channels[:-1]))
        if len(self.resolved_decoder_depths()) != s - 1:
            errors.append(
                f"decoder_depths must have {s - 1} entries, got {len(self.resolved_decoder_depths())}"
            )
        if len(self.resolved_decoder_mixers()) != s - 1:
            errors.append(
                f"decoder_mixers must have {s - 1} entries, got {len(self.resolved_decoder_mixers())}"
            )
        else:
            for i, (mixer, ch) in enumerate(zip(self.resolved_decoder_mixers(), dec_widths)):
                if mixer == "attention" and ch % self.attn_heads != 0:
                    errors.append(
                        f"decoder stage {i}: channels {ch} not divisible by attn_heads {self.attn_heads}"
                    )
        if any(k % 2 != 1 for k in self.dw_kernel) or len(self.dw_kernel) != 3:
            errors.append(f"dw_kernel must be an odd triple, got {self.dw_kernel}")
        if self.embed_kind not in ("conv", "pool"):
            errors.append(f"unknown embed_kind {self.embed_kind!r}")
        if self.merge_kind not in ("rearrange", "conv"):
            errors.append(f"unknown merge_kind {self.merge_kind!r}")
        if self.mlp_ratio <= 0:
            errors.append(f"mlp_ratio={self.mlp_ratio} must be positive")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr0: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    optimizer_kind: str = "adamp"  # "adamp" | "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float | None = None
    window: int = 16
    stride: int = 4

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self) -> "TrainConfig":
        errors = []
        if self.lr0 <= 0:
            errors.append(f"lr0={self.lr0} must be positive")
        if self.epochs < 1:
            errors.append(f"epochs={self.epochs} must be >= 1")
        if self.batch_size < 1:
            errors.append(f"batch_size={self.batch_size} must be >= 1")
        if self.optimizer_kind not in ("adamp", "adamw"):
            errors.append(f"unknown optimizer_kind {self.optimizer_kind!r}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            errors.append(f"betas={self.betas} must lie in [0,1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            errors.append(f"grad_clip={self.grad_clip} must be positive or null")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


def _default_ols_thresholds() -> tuple[float, ...]:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(9))  # 0.5 .. 0.9


@dataclass
class EvalConfig:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    kappa: dict[str, float] = field(
        default_factory=lambda: {"pedestrian": 0.5, "cyclist": 1.0, "car": 2.0}
    )
    peak_threshold: float = 0.1
    lnms_threshold: float = 0.3
    ols_thresholds: tuple[float, ...] = field(default_factory=_default_ols_thresholds)
    grid: RadarGrid = field(default_factory=RadarGrid)
    window: int = 16
    stride: int = 4

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.ols_thresholds = tuple(self.ols_thresholds)
        if isinstance(self.grid, dict):
            self.grid = RadarGrid.from_dict(self.grid)

    def kappa_of(self, class_id: int) -> float:
        return self.kappa[self.classes[class_id]]

    def validate(self) -> "EvalConfig":
        errors = []
        for name in self.classes:
            if name not in self.kappa:
                errors.append(f"kappa missing for class {name!r}")
            elif self.kappa[name] <= 0:
                errors.append(f"kappa[{name!r}]={self.kappa[name]} must be positive")
        for name, value in (
            ("peak_threshold", self.peak_threshold),
            ("lnms_threshold", self.lnms_threshold),
        ):
            if not (0 < value < 1):
                errors.append(f"{name}={value} must lie in (0,1)")
        if not self.ols_thresholds or any(not (0 < t < 1) for t in self.ols_thresholds):
            errors.append(f"ols_thresholds must be non-empty and lie in (0,1): {self.ols_thresholds}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    if isinstance(cfg, EvalConfig):
        d["grid"] = cfg.grid.to_dict()
    return d


def _from_dict(cls, d: dict):
    known = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | Path, cls):
    """Load and validate a JSON config file into the given dataclass."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a JSON object in {path}")
    cfg = _from_dict(cls, raw)
    return cfg.validate()


def tiny_model_config(**overrides) -> ModelConfig:
    """A small config for fast tests: 2 stages, <=8 channels, 8x8 grid."""
    base = dict(
        num_frames=4,
        height=8,
        width=8,
        num_classes=2,
        embed_channels=4,
        stage_channels=(8, 8),
        stage_depths=(1, 1),
        stage_mixers=("sepconv", "attention"),
        mlp_ratio=2.0,
        attn_heads=2,
    )
    base.update(overrides)
    return ModelConfig(**base).validate()
