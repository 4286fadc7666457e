"""Run configuration: nested sections with defaults, strict key checking, YAML/JSON I/O.

Defaults describe a desk-scale experiment (32x32 synthetic city, small
autoencoder).  The full-size architecture is obtained with
``model: {canvas_size: 512, num_blocks: 6, base_channels: 16,
block_multipliers: [1, 2, 4, 8, 8, 2], gru_encoder_units: [2048, 256, 128],
gru_decoder_units: [128, 256, 2048], dropout_rate: 0.5}`` on a 495x436 grid.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    city: str = "synth"
    height: int = 32
    width: int = 32
    bins_per_day: int = 288
    num_days: int = 4
    val_days: int = 1
    seed: int = 0
    drift_cells_per_bin: float = 1.0
    noise_level: float = 0.02
    num_blobs: int = 6
    blob_radius: float = 3.0
    blob_strength: float = 3.0
    wave_amplitude: float = 0.6
    wave_length_cells: float = 8.0
    rush_hours: list = field(default_factory=lambda: [[96, 8.0], [210, 10.0]])
    rush_amplitude: float = 2.0
    weekend_factor: float = 0.6
    week_offset: int = 0


@dataclass
class CodecSection:
    volume_cap_min: int = 1
    volume_cap_max: int = 64
    speed_cap_max: float = 120.0


@dataclass
class SamplerSection:
    strategy: str = "all_slots"
    q: int = 3
    batch_size: int = 8
    workers: int = 0
    prefetch_depth: int = 4


@dataclass
class ExogenousSection:
    lower: list = field(default_factory=lambda: [-20.0, 0.0, 0.0])
    upper: list = field(default_factory=lambda: [40.0, 20.0, 80.0])


@dataclass
class ModelSection:
    variant: str = "rae_all"
    canvas_size: int = 32
    num_blocks: int = 3
    base_channels: int = 8
    block_multipliers: list = field(default_factory=lambda: [1, 2, 4])
    dropout_rate: float = 0.0
    gru_encoder_units: list = field(default_factory=lambda: [256, 64, 32])
    gru_decoder_units: list = field(default_factory=lambda: [32, 64, 256])
    hidden_units: list = field(default_factory=lambda: [8, 16, 16])  # ConvLSTM baselines only
    kernel_size: int = 3

    def model_kwargs(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("variant")
        return d


@dataclass
class LossSection:
    alpha: float = 0.5
    beta: float = 0.5
    clf_weight: float = 1.0
    detach_target_embeddings: bool = False


@dataclass
class TrainSection:
    epochs: int = 10
    learning_rate: float = 1e-3
    seed: int = 0
    validate: bool = True


@dataclass
class EvalSection:
    city_profile: str = "moscow"
    block_start_bins: list = field(default_factory=list)  # overrides the profile when non-empty
    input_len: int = 12
    split: str = "val"


SECTIONS = {
    "data": DataSection, "codec": CodecSection, "sampler": SamplerSection, "exogenous": ExogenousSection,
    "model": ModelSection, "loss": LossSection, "train": TrainSection, "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    exogenous: ExogenousSection = field(default_factory=ExogenousSection)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in SECTIONS.items():
            values = doc.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in section '{name}': {sorted(bad)}")
            kwargs[name] = section_cls(**values)
        cfg = cls(**kwargs)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def check(self) -> None:
        if not 1 <= self.sampler.q <= 12:
            raise ConfigError(f"sampler.q must be in [1, 12], got {self.sampler.q}")
        if self.sampler.batch_size < 1:
            raise ConfigError("sampler.batch_size must be >= 1")
        if self.train.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.data.num_days < 1 or not 0 <= self.data.val_days < self.data.num_days:
            raise ConfigError("need data.num_days >= 1 and 0 <= data.val_days < data.num_days")
        if self.sampler.strategy not in ("non_overlapping", "all_slots", "like_test"):
            raise ConfigError(f"unknown sampler.strategy {self.sampler.strategy!r}")
        if self.eval.split not in ("train", "val", "all"):
            raise ConfigError("eval.split must be train, val or all")
