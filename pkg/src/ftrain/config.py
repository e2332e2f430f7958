"""Run configuration: dataclasses mirroring the JSON config schema."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0
    algorithm: str = "adam"
    loss_scale: float = 1.0
    alpha: float = 0.1          # label smoothing
    p_drop: float = 0.0
    seed: int = 0
    batch_tokens: int = 512
    steps: int = 2000
    log_every: int = 50
    checkpoint_every: int = 0   # 0 = disabled
    checkpoint_path: str = "checkpoint.bin"
    skip_budget: int = 20
    autotune: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1); p = 1 would zero the network")


@dataclass
class DataConfig:
    task: str = "copy"          # copy | reverse | file
    path: str | None = None
    pad_id: int = 0
    min_len: int = 2

    def __post_init__(self):
        if self.task not in ("copy", "reverse", "file"):
            raise ConfigError(f"unknown data task {self.task!r}")
        if self.task == "file" and not self.path:
            raise ConfigError("file task needs data.path")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.train.batch_tokens < self.model.max_len:
            raise ConfigError("batch_tokens must be >= max_len")
        if self.data.pad_id >= self.model.vocab:
            raise ConfigError("pad_id outside the vocabulary")

    def echo(self) -> dict:
        return {"model": asdict(self.model), "train": asdict(self.train),
                "data": asdict(self.data)}


def _build(cls, section: dict, name: str):
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {name} config: {exc}") from exc


def run_config_from_dict(raw: dict) -> RunConfig:
    return RunConfig(
        model=_build(ModelConfig, raw.get("model", {}), "model"),
        train=_build(TrainConfig, raw.get("train", {}), "train"),
        data=_build(DataConfig, raw.get("data", {}), "data"),
    )


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return run_config_from_dict(raw)
