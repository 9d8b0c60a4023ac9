"""Strict JSON configuration: defaults <- file <- ``key=value`` overrides."""

from __future__ import annotations

import json
import types
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, TypeVar, Union

from .corpus import normalize_policy
from .encoder import POOLING_MODES, EncoderConfig

TEACHER_INPUTS = ("context_plus_future", "future_only")
TASKS = ("intent", "act", "dst", "rs")
TASK_BATCH_SIZE = {"intent": 8, "dst": 25, "act": 16, "rs": 100}
LR_GRID = (2e-5, 5e-5, 7e-5, 1e-4, 2e-4)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    seed: int = 0
    corpus: Optional[str] = None
    epochs: int = 30
    sync_interval: int = 10
    mlm_ratio: float = 0.15
    distill_layers: Optional[int] = None
    future_policy: str = "all"
    teacher_input: str = "context_plus_future"
    normalize: bool = False
    batch_size: int = 32
    learning_rate: float = 5e-5
    warmup_steps: int = 0
    min_freq: int = 1
    checkpoint_every: int = 1
    layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    max_len: int = 512
    dropout: float = 0.2
    pooling: str = "cls"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not 1 <= self.sync_interval <= self.epochs:
            raise ConfigError(f"sync_interval must be in [1, epochs={self.epochs}]")
        if not 0 < self.mlm_ratio < 1:
            raise ConfigError("mlm_ratio must be in (0, 1)")
        if self.distill_layers is not None and self.distill_layers < 1:
            raise ConfigError("distill_layers must be >= 1")
        object.__setattr__(self, "future_policy", normalize_policy(self.future_policy))
        if self.teacher_input not in TEACHER_INPUTS:
            raise ConfigError(f"teacher_input must be one of {TEACHER_INPUTS}")
        if self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.warmup_steps < 0:
            raise ConfigError("batch_size, learning_rate must be positive; warmup_steps >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    @property
    def top_k(self) -> int:
        """Distillation layer count, clamped to the encoder depth."""
        return min(self.distill_layers or self.layers, self.layers)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size, layers=self.layers, hidden_dim=self.hidden_dim, heads=self.heads,
            ffn_dim=self.ffn_dim, max_len=self.max_len, dropout=self.dropout, pooling=self.pooling,
        )

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class FinetuneConfig:
    task: str = "intent"
    seed: int = 0
    epochs: int = 50
    batch_size: Optional[int] = None
    learning_rate: float = 2e-4
    eval_every: int = 50
    patience: int = 10
    freeze_encoder: bool = False
    pooling: Optional[str] = None
    max_len: Optional[int] = None
    shots: Optional[int] = None
    temperature: float = 1.0
    act_threshold: float = 0.5

    def __post_init__(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.epochs < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("epochs, eval_every and patience must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pooling is not None and self.pooling not in POOLING_MODES:
            raise ConfigError(f"pooling must be one of {POOLING_MODES}")
        if self.temperature <= 0 or self.learning_rate <= 0:
            raise ConfigError("temperature and learning_rate must be positive")

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size or TASK_BATCH_SIZE[self.task]

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


C = TypeVar("C", PretrainConfig, FinetuneConfig)


def _check_type(key: str, value: Any, annotation: Any) -> Any:
    origin = typing.get_origin(annotation)
    if origin in (Union, types.UnionType):
        args = typing.get_args(annotation)
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _check_type(key, value, inner)
    if annotation is bool:
        if isinstance(value, bool):
            return value
    elif annotation is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif annotation is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif annotation is str:
        if isinstance(value, (str, int)) and not isinstance(value, bool):
            return str(value)
    raise ConfigError(f"config key {key!r}: expected {getattr(annotation, '__name__', annotation)}, got {value!r}")


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(
    cls: type[C],
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    base: Mapping[str, Any] | None = None,
) -> C:
    """Build ``cls`` from defaults, then ``base``, then the JSON file, then overrides."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    doc: dict[str, Any] = dict(base or {})
    if path is not None:
        text = Path(path).read_text(encoding="utf-8").strip()
        try:
            loaded = json.loads(text) if text else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        doc.update(loaded)
    doc.update(parse_override(o) for o in overrides)
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    checked = {k: _check_type(k, v, hints[k]) for k, v in doc.items()}
    return cls(**checked)
