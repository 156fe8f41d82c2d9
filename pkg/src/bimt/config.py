"""Flat ``key = value`` run configuration.

Lines starting with ``#`` (and anything after a ``#``) are comments. Unknown
keys are rejected. Values are parsed according to the field's type.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0

    # tokenizers
    lm_vocab_size: int = 200
    dec_vocab_size: int = 200

    # bilingual LM
    lm_layers: int = 4
    lm_dim: int = 64
    lm_heads: int = 4
    lm_ffn: int = 128
    lm_dropout: float = 0.1
    lm_max_positions: int = 64
    lm_steps: int = 3000
    lm_peak_lr: float = 1e-3
    lm_warmup: int = 300
    lm_power: float = 1.0
    lm_beta1: float = 0.9
    lm_beta2: float = 0.999
    lm_weight_decay: float = 0.0
    lm_batch_tokens: int = 1024
    mask_prob: float = 0.15

    # translation model
    enc_layers: int = 2
    dec_layers: int = 2
    nmt_dim: int = 64
    nmt_heads: int = 4
    nmt_ffn: int = 128
    nmt_dropout: float = 0.1
    nmt_max_positions: int = 128
    prenorm: bool = True
    tie_output: bool = False
    source_embedding: str = "lm"
    k: int = 2
    layer_selection: bool = True
    per_batch_p: bool = True

    # translation training
    steps: int = 2000
    peak_lr: float = 1e-3
    warmup: int = 250
    init_lr: float = 0.0
    label_smoothing: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    batch_tokens: int = 1024

    # one-stage fine-tuning
    ft_steps: int = 200
    ft_peak_lr: float = 3e-4
    ft_warmup: int = 25
    ft_continue_schedule: bool = False

    # decoding
    beam: int = 4
    alpha: float = 0.6
    length_penalty: str = "simple"

    log_interval: int = 100
    save_interval: int = 0

    # optional data paths
    train_src: str = ""
    train_tgt: str = ""
    dev_src: str = ""
    dev_tgt: str = ""
    lm_corpus: str = ""

    def validate(self) -> "RunConfig":
        if self.source_embedding not in ("lm", "random"):
            raise ConfigError(f"source_embedding must be 'lm' or 'random', got {self.source_embedding!r}")
        if self.length_penalty not in ("simple", "gnmt"):
            raise ConfigError(f"length_penalty must be 'simple' or 'gnmt', got {self.length_penalty!r}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.lm_warmup >= self.lm_steps:
            raise ConfigError(f"lm_warmup ({self.lm_warmup}) must be < lm_steps ({self.lm_steps})")
        for name in ("warmup", "ft_warmup"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lm_dim", "nmt_dim"):
            heads = self.lm_heads if name == "lm_dim" else self.nmt_heads
            if getattr(self, name) % heads:
                raise ConfigError(f"{name} must be divisible by its head count")
        if self.beam < 1:
            raise ConfigError("beam must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_overrides(items) -> dict:
    out = {}
    for n, line in enumerate(items, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _convert(key, raw)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(parse_overrides(text.splitlines()))
    values.update(parse_overrides(overrides))
    return RunConfig(**values).validate()
