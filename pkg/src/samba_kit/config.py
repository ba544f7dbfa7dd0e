"""Strict JSON run configuration."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig
from .training import MaskConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerSection:
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)


@dataclass
class ScheduleSection:
    initial_lr: float = 2.5e-4
    max_lr: float = 5e-4
    final_lr: float = 5e-6
    warmup_fraction: float = 0.10


@dataclass
class TrainSection:
    epochs: int = 200
    batch_size: int = 16
    max_steps: int | None = None
    val_fraction: float = 0.1
    eval_masked: bool = True
    checkpoint_every: int = 1
    loss_alpha: float = 1.0
    loss_beta: float = 1.0


@dataclass
class DataSection:
    standardize: bool = True


@dataclass
class ProbeSection:
    mode: str = "linear"
    test_fraction: float = 0.3
    l2: float = 1e-3
    max_iters: int = 2000
    tap: str = "mdm"
    stats: str = "quantile"
    epochs: int = 3
    lr: float = 5e-4
    freeze_body: bool = False


@dataclass
class BenchSection:
    variants: tuple[str, ...] = ("scan", "quadratic", "conv")
    lengths: tuple[int, ...] = (200, 2000)
    channels: int = 22
    reps: int = 5
    batch: int = 1

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.lengths = tuple(self.lengths)


SECTIONS = {
    "model": ModelConfig,
    "masking": MaskConfig,
    "optimizer": OptimizerSection,
    "schedule": ScheduleSection,
    "train": TrainSection,
    "data": DataSection,
    "probe": ProbeSection,
    "bench": BenchSection,
}
TOP_LEVEL = {"seed", "deterministic", "output_dir", *SECTIONS}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    masking: MaskConfig = field(default_factory=MaskConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    bench: BenchSection = field(default_factory=BenchSection)
    seed: int = 0
    deterministic: bool = True
    output_dir: str = "runs"

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            **asdict(self.train), **asdict(self.schedule), **asdict(self.optimizer), seed=self.seed,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cls, section: str, d) -> object:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} section: {e}") from None


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kw = {name: _build(cls, name, d.get(name, {})) for name, cls in SECTIONS.items()}
    for k in ("seed", "deterministic", "output_dir"):
        if k in d:
            kw[k] = d[k]
    cfg = RunConfig(**kw)
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.probe.mode not in ("linear", "finetune"):
        raise ConfigError("probe.mode must be 'linear' or 'finetune'")
    return cfg


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(d)
