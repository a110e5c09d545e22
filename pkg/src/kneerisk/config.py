"""Run configuration: one dataclass per pipeline stage, loaded from YAML.

Defaults carry the full-scale hyperparameters; desk-scale overrides live in
``configs/desk.yaml``. Unknown keys are rejected so that typos never silently
fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


@dataclass
class PhantomParams:
    image_size: int = 64
    # (low, high) per KL grade 0..4, in pixels; strictly decreasing in grade
    joint_space_width_by_grade: list = field(
        default_factory=lambda: [[9.0, 11.0], [7.0, 9.0], [5.0, 7.0], [3.0, 5.0], [1.0, 3.0]]
    )
    osteophyte_count_by_grade: list = field(
        default_factory=lambda: [[0, 0], [0, 1], [1, 2], [2, 3], [3, 4]]
    )
    sclerosis_intensity_by_grade: list = field(
        default_factory=lambda: [[0.0, 0.0], [0.0, 0.06], [0.06, 0.12], [0.12, 0.18], [0.18, 0.25]]
    )
    noise_sigma: float = 0.02
    progression_prob_by_grade: list = field(default_factory=lambda: [0.3, 0.35, 0.35, 0.3, 0.0])
    # correlation between the visible within-grade severity and the hidden
    # progression draw; 0 makes progression invisible in x0
    progression_visibility: float = 0.9

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        for name in ("joint_space_width_by_grade", "osteophyte_count_by_grade",
                     "sclerosis_intensity_by_grade"):
            ranges = getattr(self, name)
            if len(ranges) != 5 or any(len(r) != 2 or r[0] > r[1] for r in ranges):
                raise ConfigError(f"{name} must hold 5 (low, high) ranges")
        jsw = self.joint_space_width_by_grade
        for g in range(4):
            if not (jsw[g + 1][0] < jsw[g][0] and jsw[g + 1][1] < jsw[g][1]):
                raise ConfigError("joint_space_width_by_grade must be strictly decreasing in grade")
        if jsw[4][0] <= 0:
            raise ConfigError("joint space width must stay positive")
        for name in ("osteophyte_count_by_grade", "sclerosis_intensity_by_grade"):
            ranges = getattr(self, name)
            for g in range(4):
                if ranges[g + 1][0] < ranges[g][0] or ranges[g + 1][1] < ranges[g][1]:
                    raise ConfigError(f"{name} must be nondecreasing in grade")
        for lo, hi in self.sclerosis_intensity_by_grade:
            if lo < 0 or hi > 1:
                raise ConfigError("sclerosis intensities must lie in [0, 1]")
        p = self.progression_prob_by_grade
        if len(p) != 5 or any(not 0.0 <= q <= 1.0 for q in p):
            raise ConfigError("progression_prob_by_grade must be 5 probabilities")
        if p[4] != 0.0:
            raise ConfigError("grade 4 cannot progress (progression_prob_by_grade[4] must be 0)")
        if not 0.0 <= self.progression_visibility < 1.0:
            raise ConfigError("progression_visibility must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")


@dataclass
class DatasetConfig:
    n_train: int = 60
    n_val: int = 8
    n_test: int = 8
    timepoints: list = field(default_factory=lambda: [0, 12, 24, 36, 48])
    landmark_fraction: float = 0.016  # 748 annotated of 47,027 radiographs
    left_fraction: float = 0.5
    grade_weights: list = field(default_factory=lambda: [0.3, 0.2, 0.2, 0.2, 0.1])
    phantom: PhantomParams = field(default_factory=PhantomParams)


@dataclass
class VqVaeConfig:
    latent_channels: int = 4
    compression: int = 8
    codebook_size: int = 256
    hidden_channels: int = 32
    alpha: float = 1e-4
    beta: float = 0.25
    epochs: int = 5
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    classifier_hidden: int = 32
    # reseed codes unused for this many steps from live encoder outputs; 0 disables
    dead_code_restart_every: int = 10
    restart_until: float = 0.7  # fraction of training after which restarts stop


@dataclass
class DiffusionConfig:
    timesteps: int = 1000
    sample_steps: int = 100
    ema_decay: float = 0.995
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    adam_betas: list = field(default_factory=lambda: [0.9, 0.99])
    base_channels: int = 32
    attention_heads: int = 4


@dataclass
class ClassifierConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    lr_min: float = 1e-6
    adam_betas: list = field(default_factory=lambda: [0.9, 0.999])
    delta: float = 0.5
    multitask: bool = True
    softargmax_temperature: float = 1.0
    image_classifier_epochs: int = 10


@dataclass
class RiskConfig:
    upscale: bool = False
    steps: int = 100


@dataclass
class EvalConfig:
    bench_steps: list = field(default_factory=lambda: [100, 1000])
    bench_samples: int = 5
    strict: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vqvae: VqVaeConfig = field(default_factory=VqVaeConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or '<root>'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or '<root>'}: {', '.join(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    cfg.dataset.phantom.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    return config_from_dict(yaml.safe_load(text))


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
