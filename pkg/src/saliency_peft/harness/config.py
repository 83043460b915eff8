"""Run configuration: strict JSON loading into dataclasses."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..backbone import BackboneConfig, ConfigError
from ..decoders import DecoderConfig
from ..model import ModelConfig
from ..peft import PeftConfig
from ..prompts import PromptsConfig


@dataclass
class LossConfig:
    bce_weight: float = 1.0
    iou_weight: float = 1.0


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 2e-4
    weight_decay: float = 0.0


@dataclass
class PathsConfig:
    train_data: Optional[str] = None
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    peft: PeftConfig = field(default_factory=PeftConfig)
    prompts: PromptsConfig = field(default_factory=PromptsConfig.two_source_default)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 8
    steps: int = 2000
    checkpoint_every: int = 0
    seed: int = 0
    # fail on undecodable dataset files unless set
    skip_bad_files: bool = False
    # assert every step that the optimizer holds exactly the trainable set
    debug: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.peft, self.prompts, self.decoder)

    def validate(self) -> None:
        self.model_config().validate()
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.steps < 0 or self.checkpoint_every < 0:
            raise ConfigError("steps and checkpoint_every must be non-negative")
        if self.optimizer.kind not in ("adamw", "adam"):
            raise ConfigError(f"optimizer.kind must be 'adamw' or 'adam', got {self.optimizer.kind!r}")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = _build(cls, data, "config")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(data)


def _build(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _build(inner[0], value, where)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        return [_build(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = sorted(set(value) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {unknown}")
        kwargs = {k: _build(hints[k], v, f"{where}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except TypeError as e:
            raise ConfigError(f"{where}: {e}") from e
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not (isinstance(value, tp) and not (tp is int and isinstance(value, bool))):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value
