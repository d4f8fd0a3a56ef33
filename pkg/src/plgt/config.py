"""Model and run configuration records, Table-1 presets and the flat config file format."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .exceptions import ConfigError

ATTENTION_KINDS = ("plga", "sdpa")


@dataclass
class ModelConfig:
    """Hyperparameters of the encoder-decoder.

    ``d_model`` plays both the embedding width and the language-model width,
    which are always equal. The defaults are the desk-scale configuration.
    """

    attention: str = "plga"
    num_layers: int = 1
    num_heads: int = 4
    d_model: int = 32
    dff: int = 64
    a_dff: int = 16
    res_units: int = 2
    res_dense_layers: int = 2
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    max_len: int = 128
    dropout_outside: float = 0.4
    dropout_res: float = 0.1
    dropout_elm: float = 0.1
    dropout_qk: float = 0.0
    leaky_slope: float = 0.2
    metric_eps: float = 1e-9
    ln_eps: float = 1e-6

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads

    def validate(self) -> "ModelConfig":
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        for name in ("num_layers", "num_heads", "d_model", "dff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ConfigError(f"d_model={self.d_model} must be even for sinusoidal positions")
        if self.attention == "plga":
            if self.res_units < 0 or self.res_dense_layers < 0:
                raise ConfigError("res_units and res_dense_layers must be >= 0")
            if self.res_units and self.res_dense_layers and self.a_dff < 1:
                raise ConfigError("a_dff must be >= 1")
        for name in ("dropout_outside", "dropout_res", "dropout_elm", "dropout_qk"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {rate}")
        if self.src_vocab_size < 1 or self.tgt_vocab_size < 1:
            raise ConfigError("vocabulary sizes must be set before building a model")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


# Reference grid rows: heads, A-dff, res dense layers, res units (d_LM, dff, layers in FULL_SCALE).
TABLE1 = {
    "1": dict(num_heads=16, a_dff=128, res_dense_layers=2, res_units=10),
    "2": dict(num_heads=8, a_dff=256, res_dense_layers=2, res_units=9),
    "3": dict(num_heads=8, a_dff=256, res_dense_layers=2, res_units=8),
    "4": dict(num_heads=4, a_dff=512, res_dense_layers=2, res_units=5),
    "5": dict(num_heads=2, a_dff=1024, res_dense_layers=2, res_units=2),
    "6": dict(num_heads=1, a_dff=2048, res_dense_layers=2, res_units=1),
}
SDPA_ROW = dict(attention="sdpa", num_layers=4, num_heads=8, res_units=0, res_dense_layers=0,
                dropout_outside=0.1)
FULL_SCALE = dict(d_model=512, dff=2048, num_layers=1)
DEFAULT_WARMUP = {"plga": 15000, "sdpa": 4000}


def table1_overrides(row: str) -> dict[str, Any]:
    """Hyperparameter overrides for a reference grid row ("1".."6" or "sdpa")."""
    row = str(row).strip().lower().lstrip("#")
    if row == "sdpa":
        return {**FULL_SCALE, **SDPA_ROW}
    if row not in TABLE1:
        raise ConfigError(f"invalid --table1-row value {row!r}; expected 1-6 or sdpa")
    return {**FULL_SCALE, "attention": "plga", **TABLE1[row]}


def table1_config(row: str, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
    cfg = ModelConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size)
    for key, value in table1_overrides(row).items():
        setattr(cfg, key, value)
    return cfg.validate()


@dataclass
class RunConfig:
    """Everything a training/evaluation run needs; echoed into checkpoints."""

    # model
    attention: str = "plga"
    num_layers: int = 1
    num_heads: int = 4
    d_model: int = 32
    dff: int = 64
    a_dff: int = 16
    res_units: int = 2
    res_dense_layers: int = 2
    max_len: int = 128
    dropout_outside: float = 0.4
    dropout_res: float = 0.1
    dropout_elm: float = 0.1
    dropout_qk: float = 0.0
    leaky_slope: float = 0.2
    # data
    train_path: str = ""
    val_path: str = ""
    src_vocab_cap: int = 200
    tgt_vocab_cap: int = 200
    min_freq: int = 2
    lowercase: bool = False
    max_seq_len: int = 64
    # optimisation
    seed: int = 0
    epochs: int = 10
    batch_size: int = 64
    warmup: int = 0
    lr_scale: float = 1.0
    # checkpoints
    ckpt_dir: str = "checkpoints"
    checkpoint_every: int = 0
    patience_epochs: int = 10
    # decoding
    beam_width: int = 4
    alpha: float = 0.6
    max_extra: int = 50

    def warmup_steps(self) -> int:
        return self.warmup if self.warmup > 0 else DEFAULT_WARMUP[self.attention]

    def model_config(self, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
        model_keys = {f.name for f in fields(ModelConfig)}
        kwargs = {k: v for k, v in dataclasses.asdict(self).items() if k in model_keys}
        return ModelConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size, **kwargs).validate()

    def update(self, overrides: dict[str, Any]) -> "RunConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, value in overrides.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, value, getattr(self, key)))
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return cls().update(data)

    def dumps(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key: str, value: Any, current: Any) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if isinstance(current, bool):
            lowered = value.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return lowered in ("true", "1", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_run_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg.update(overrides)
    return cfg


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


__all__ = [
    "ModelConfig", "RunConfig", "TABLE1", "DEFAULT_WARMUP", "table1_config", "table1_overrides",
    "parse_config_text", "load_run_config", "dumps_json",
]
