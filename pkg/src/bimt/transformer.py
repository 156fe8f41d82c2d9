"""Transformer layers written against flat parameter tables.

Every forward function takes a ``Mapping[str, Tensor]`` of parameters for its
own scope (see ``ParamStore.scope``). Inputs may be ``[L, d]`` or batched
``[B, L, d]``; padding masks are boolean with True at padded positions.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch

from . import numcore as nc
from .errors import ConfigError, ShapeError

Params = Mapping[str, torch.Tensor]


class PositionMode(str, enum.Enum):
    LEARNED = "learned"
    SINUSOIDAL = "sinusoidal"


@dataclass(frozen=True)
class TransformerConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    dropout_p: float = 0.1
    max_positions: int = 128
    position_mode: PositionMode = PositionMode.SINUSOIDAL
    prenorm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "position_mode", PositionMode(self.position_mode))
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["position_mode"] = self.position_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerConfig":
        return cls(**d)


@dataclass
class ContextStack:
    """Outputs of every encoder layer, bottom to top (layer 1 .. M)."""

    layers: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("ContextStack needs at least one layer")
        shape = self.layers[0].shape
        for i, h in enumerate(self.layers):
            if h.shape != shape:
                raise ShapeError(f"layer {i + 1} has shape {tuple(h.shape)}, expected {tuple(shape)}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def __len__(self):
        return len(self.layers)

    def layer(self, i: int) -> torch.Tensor:
        """1-based access, bottom layer first."""
        if not 1 <= i <= len(self.layers):
            raise IndexError(f"layer {i} outside 1..{len(self.layers)}")
        return self.layers[i - 1]


# parameter initialisation


def _xavier(fan_in: int, fan_out: int, gen: torch.Generator) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(fan_in, fan_out, generator=gen) * 2 - 1) * bound


def _init_attention(store, prefix: str, d: int, gen):
    for name in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{name}", _xavier(d, d, gen))
        store.add(f"{prefix}.b{name}", torch.zeros(d))


def _init_ln(store, prefix: str, d: int):
    store.add(f"{prefix}.g", torch.ones(d))
    store.add(f"{prefix}.b", torch.zeros(d))


def _init_ffn(store, prefix: str, d: int, ffn: int, gen):
    store.add(f"{prefix}.w1", _xavier(d, ffn, gen))
    store.add(f"{prefix}.b1", torch.zeros(ffn))
    store.add(f"{prefix}.w2", _xavier(ffn, d, gen))
    store.add(f"{prefix}.b2", torch.zeros(d))


def init_encoder(store, prefix: str, config: TransformerConfig, gen: torch.Generator):
    d = config.hidden_dim
    for i in range(config.num_layers):
        _init_attention(store, f"{prefix}.{i}.attn", d, gen)
        _init_ln(store, f"{prefix}.{i}.ln1", d)
        _init_ffn(store, f"{prefix}.{i}.ffn", d, config.ffn_dim, gen)
        _init_ln(store, f"{prefix}.{i}.ln2", d)
    if config.prenorm:
        _init_ln(store, f"{prefix}.final_ln", d)


def init_decoder(store, prefix: str, config: TransformerConfig, vocab_size: int, gen: torch.Generator,
                 tie_output: bool = False):
    d = config.hidden_dim
    for i in range(config.num_layers):
        _init_attention(store, f"{prefix}.{i}.self", d, gen)
        _init_ln(store, f"{prefix}.{i}.ln1", d)
        _init_attention(store, f"{prefix}.{i}.cross", d, gen)
        _init_ln(store, f"{prefix}.{i}.ln2", d)
        _init_ffn(store, f"{prefix}.{i}.ffn", d, config.ffn_dim, gen)
        _init_ln(store, f"{prefix}.{i}.ln3", d)
    if config.prenorm:
        _init_ln(store, f"{prefix}.final_ln", d)
    if not tie_output:
        store.add(f"{prefix}.out.w", _xavier(d, vocab_size, gen))


def _sub(params: Params, prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# masks


def padding_mask_additive(pad_mask: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """[B, Lk] bool -> [B, 1, Lk] additive mask with -inf at padding."""
    m = torch.zeros(pad_mask.shape, dtype=dtype)
    m = m.masked_fill(pad_mask, float("-inf"))
    return m.unsqueeze(1)


def causal_mask_additive(length: int, dtype=torch.float32) -> torch.Tensor:
    return torch.triu(torch.full((length, length), float("-inf"), dtype=dtype), diagonal=1)


# layers


def multi_head_attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
                         additive_mask: torch.Tensor | None, params: Params, num_heads: int,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``num_heads`` heads, concatenated and projected.

    ``additive_mask`` must broadcast to ``[B, Lq, Lk]``; -inf entries get zero weight.
    """
    squeeze = queries.dim() == 2
    if squeeze:
        queries, keys, values = queries.unsqueeze(0), keys.unsqueeze(0), values.unsqueeze(0)
    B, Lq, d = queries.shape
    Lk = keys.shape[1]
    if keys.shape[:2] != values.shape[:2] or keys.shape[0] != B or d % num_heads:
        raise ShapeError(f"attention: queries {tuple(queries.shape)}, keys {tuple(keys.shape)}, "
                         f"values {tuple(values.shape)}, heads {num_heads}")
    if additive_mask is not None:
        try:
            if torch.broadcast_shapes(additive_mask.shape, (B, Lq, Lk)) != (B, Lq, Lk):
                raise RuntimeError
        except RuntimeError:
            raise ShapeError(f"attention mask shape {tuple(additive_mask.shape)} does not match "
                             f"[B, Lq, Lk] = {(B, Lq, Lk)}") from None
    dh = d // num_heads

    def heads(x, w, b, L):
        return (x @ params[w] + params[b]).view(B, L, num_heads, dh).transpose(1, 2)

    q = heads(queries, "wq", "bq", Lq)
    k = heads(keys, "wk", "bk", Lk)
    v = heads(values, "wv", "bv", Lk)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if additive_mask is not None:
        # [B, Lq, Lk] -> [B, 1, Lq, Lk] so the mask is shared across heads
        scores = scores + (additive_mask.unsqueeze(1) if additive_mask.dim() == 3 else additive_mask)
    weights = nc.softmax(scores)
    ctx = (weights @ v).transpose(1, 2).reshape(B, Lq, d)
    out = ctx @ params["wo"] + params["bo"]
    if squeeze:
        out, weights = out[0], weights[0]
    return (out, weights) if return_weights else out


def feed_forward(x: torch.Tensor, params: Params, activation: str) -> torch.Tensor:
    act = nc.gelu if activation == "gelu" else nc.relu
    return act(x @ params["w1"] + params["b1"]) @ params["w2"] + params["b2"]


def _ln(x, params: Params, name: str):
    return nc.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _residual(x, sublayer, params, ln_name, config, train, gen):
    if config.prenorm:
        return x + nc.dropout(sublayer(_ln(x, params, ln_name)), config.dropout_p, gen, train)
    return _ln(x + nc.dropout(sublayer(x), config.dropout_p, gen, train), params, ln_name)


def encoder_forward(input_embeddings: torch.Tensor, padding_mask: torch.Tensor | None,
                    config: TransformerConfig, params: Params, train: bool = False,
                    generator: torch.Generator | None = None) -> ContextStack:
    """Run all encoder layers; returns every layer's output.

    With ``prenorm`` the closing layer norm is applied to the top layer only.
    """
    x = input_embeddings
    squeeze = x.dim() == 2
    if squeeze:
        x = x.unsqueeze(0)
        if padding_mask is not None:
            padding_mask = padding_mask.unsqueeze(0)
    if x.shape[-1] != config.hidden_dim:
        raise ShapeError(f"encoder: input dim {x.shape[-1]} != hidden_dim {config.hidden_dim}")
    if x.shape[1] > config.max_positions:
        raise ShapeError(f"encoder: length {x.shape[1]} exceeds max_positions {config.max_positions}")
    mask = padding_mask_additive(padding_mask, x.dtype) if padding_mask is not None else None

    layers = []
    for i in range(config.num_layers):
        lp = _sub(params, str(i))
        attn = _sub(lp, "attn")
        ffn = _sub(lp, "ffn")
        x = _residual(x, lambda h: multi_head_attention(h, h, h, mask, attn, config.num_heads),
                      lp, "ln1", config, train, generator)
        x = _residual(x, lambda h: feed_forward(h, ffn, config.activation), lp, "ln2", config, train, generator)
        layers.append(x)
    if config.prenorm:
        layers[-1] = _ln(layers[-1], params, "final_ln")
    if squeeze:
        layers = [h[0] for h in layers]
    return ContextStack(layers)


def decoder_hidden(target_embeddings: torch.Tensor, encoder_output: torch.Tensor,
                   self_mask: torch.Tensor | None, cross_mask: torch.Tensor | None,
                   config: TransformerConfig, params: Params, train: bool = False,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    y = target_embeddings
    if y.shape[-2] > config.max_positions:
        raise ShapeError(f"decoder: length {y.shape[-2]} exceeds max_positions {config.max_positions}")
    if y.shape[-1] != config.hidden_dim or encoder_output.shape[-1] != config.hidden_dim:
        raise ShapeError(f"decoder: dims {tuple(y.shape)} / {tuple(encoder_output.shape)} "
                         f"vs hidden_dim {config.hidden_dim}")
    for i in range(config.num_layers):
        lp = _sub(params, str(i))
        sa, ca, ffn = _sub(lp, "self"), _sub(lp, "cross"), _sub(lp, "ffn")
        y = _residual(y, lambda h: multi_head_attention(h, h, h, self_mask, sa, config.num_heads),
                      lp, "ln1", config, train, generator)
        y = _residual(y, lambda h: multi_head_attention(h, encoder_output, encoder_output, cross_mask, ca,
                                                        config.num_heads),
                      lp, "ln2", config, train, generator)
        y = _residual(y, lambda h: feed_forward(h, ffn, config.activation), lp, "ln3", config, train, generator)
    if config.prenorm:
        y = _ln(y, params, "final_ln")
    return y


def decoder_forward(target_embeddings: torch.Tensor, encoder_output: torch.Tensor,
                    self_mask: torch.Tensor | None, cross_mask: torch.Tensor | None,
                    config: TransformerConfig, params: Params, output_weight: torch.Tensor | None = None,
                    train: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
    """Causal decoder stack followed by the vocabulary projection.

    ``self_mask`` should already contain the causal part (see ``causal_mask_additive``).
    ``output_weight`` is ``[d, V]``; when omitted ``params['out.w']`` is used.
    """
    y = decoder_hidden(target_embeddings, encoder_output, self_mask, cross_mask, config, params, train, generator)
    w = output_weight if output_weight is not None else params["out.w"]
    return y @ w


@functools.lru_cache(maxsize=32)
def _sinusoid(length: int, dim: int, dtype) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


def sinusoidal_table(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    return _sinusoid(length, dim, dtype).clone()


def positional_encoding(length: int, config: TransformerConfig, table: torch.Tensor | None = None) -> torch.Tensor:
    if length > config.max_positions:
        raise ShapeError(f"length {length} exceeds max_positions {config.max_positions}")
    if config.position_mode is PositionMode.SINUSOIDAL:
        return sinusoidal_table(length, config.hidden_dim)
    if table is None:
        raise ValueError("learned positions need the position table")
    return table[:length]
