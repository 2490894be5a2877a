"""Run configuration: a single JSON file of nested key-value sections.

The file fully determines a run. Command-line flags of the form
``--section.key=value`` override individual leaves and are echoed into the
run manifest. Unknown sections or keys are rejected up front.

Schema (defaults shown by ``streamlat gen-data --print-config``):

  run       mode {srmlt,fixed-mlt,baseline}, seed, workers, max_decode_steps
  task      synthetic-task knobs (vocab, dims, frame/silence ranges, noise, seed)
  data      train/dev/test utterance counts
  model     architecture (dims, layers, heads, streaming kind, chunk width, ...)
  training  epochs, offset delta, granularity, tolerance, batch size, lr schedule
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .model import ModelConfig
from .synthdata import TaskSpec


class ConfigError(ValueError):
    """The configuration file or an override flag is malformed."""


@dataclass
class RunSection:
    mode: str = "srmlt"  # {"srmlt", "fixed-mlt", "baseline"}
    seed: int = 0
    workers: int = 1
    max_decode_steps: int = 48

    def __post_init__(self):
        if self.mode not in ("srmlt", "fixed-mlt", "baseline"):
            raise ConfigError(f"unknown run mode {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass
class DataSection:
    train_utterances: int = 2000
    dev_utterances: int = 200
    test_utterances: int = 200

    @property
    def total(self) -> int:
        return self.train_utterances + self.dev_utterances + self.test_utterances


@dataclass
class ModelSection:
    model_dim: int = 16
    encoder_layers: int = 1
    decoder_layers: int = 1
    ffn_dim: int = 32
    attention_heads: int = 2
    streaming_kind: str = "ca"
    streaming_heads: int = 1
    chunk_width: int = 4
    subsample_factor: int = 4
    noise_std: float = 1.0
    energy_bias_init: float = -1.0
    selector_bias_init: float = -4.0
    label_smoothing: float = 0.1


@dataclass
class TrainingSection:
    pretrain_epochs: int = 6
    finetune_epochs: int = 4
    delta: int = 2
    granularity: str = "minibatch"
    tolerance: float = 0.001
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_steps: int = 100
    finetune_lr_scale: float = 0.1
    eval_every: int = 1
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.delta < 0:
            raise ConfigError("offset delta must be >= 0")
        if self.tolerance < 0:
            raise ConfigError("equality tolerance must be >= 0")
        if self.granularity not in ("token", "utterance", "minibatch"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.task.vocab_size,
            feature_dim=self.task.feature_dim,
            **dataclasses.asdict(self.model),
        )


_SECTIONS = {
    "run": RunSection,
    "task": TaskSpec,
    "data": DataSection,
    "model": ModelSection,
    "training": TrainingSection,
}

# TaskSpec.class_means is derived from the seed, never serialized.
_SKIP_FIELDS = {("task", "class_means")}


def config_to_dict(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for section, cls in _SECTIONS.items():
        obj = getattr(cfg, section)
        entries = {}
        for f in fields(cls):
            if (section, f.name) in _SKIP_FIELDS:
                continue
            value = getattr(obj, f.name)
            entries[f.name] = list(value) if isinstance(value, tuple) else value
        out[section] = entries
    return out


def _coerce(section: str, cls, key: str, value: Any) -> Any:
    valid = {f.name: f for f in fields(cls) if (section, f.name) not in _SKIP_FIELDS}
    if key not in valid:
        raise ConfigError(f"unknown config key {section}.{key}")
    current = getattr(cls(), key)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        return tuple(int(v) for v in value)
    if isinstance(current, bool):
        return value in (True, "true", "1", 1)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return str(value)


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    kwargs = {}
    for section, entries in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(entries, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        cls = _SECTIONS[section]
        coerced = {k: _coerce(section, cls, k, v) for k, v in entries.items()}
        try:
            kwargs[section] = cls(**coerced)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from exc
    return RunConfig(**kwargs)


def load_config(path: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Defaults, overlaid with the JSON file, then with ``section.key=value``."""
    data = config_to_dict(RunConfig())
    if path is not None:
        with open(path, "r", encoding="utf-8") as fp:
            try:
                file_data = json.load(fp)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        for section, entries in file_data.items():
            if section not in data:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(entries, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            for key, value in entries.items():
                if key not in data[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                data[section][key] = value
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in data or key not in data[section]:
            raise ConfigError(f"unknown config key {dotted}")
        data[section][key] = value
    return config_from_dict(data)
