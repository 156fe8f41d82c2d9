"""Frozen LM layer outputs as NMT encoder input, with stochastic layer selection.

During training one of the top-K layers is picked per batch from a uniform
draw ``p``: layer ``M - i + 1`` for the unique ``i`` with ``(i-1)/K < p <= i/K``.
At inference the K layers are averaged, which is the expectation of that draw.
"""
from __future__ import annotations

import enum
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, DataError
from .mlm import LMCheckpoint
from .subword import BOS_ID, EOS_ID, encode
from .transformer import ContextStack


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def _check_k(k: int, m: int):
    if not 1 <= k <= m:
        raise ConfigError(f"K={k} must satisfy 1 <= K <= M={m} (LM layer count)")


def selected_layer(m: int, k: int, p: float) -> int:
    """1-based LM layer chosen by draw ``p`` among the top ``k`` of ``m`` layers."""
    _check_k(k, m)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if p == 0.0:
        return m
    for i in range(1, k + 1):
        if (i - 1) / k < p <= i / k:
            return m - i + 1
    raise AssertionError("unreachable: p in (0, 1] always falls in one interval")


def select_train(stack: ContextStack, k: int, p: float) -> torch.Tensor:
    return stack.layer(selected_layer(stack.num_layers, k, p))


def select_infer(stack: ContextStack, k: int) -> torch.Tensor:
    m = stack.num_layers
    _check_k(k, m)
    if k == 1:
        return stack.layer(m)
    total = stack.layer(m).clone()
    for i in range(2, k + 1):
        total = total + stack.layer(m - i + 1)
    return total / k


def sample_p(rng: np.random.Generator) -> float:
    """One uniform draw on [0, 1], shared by every sentence of a batch."""
    return float(rng.uniform(0.0, 1.0))


class EmbeddingProvider:
    """Serves contextual embeddings from a frozen LM.

    Stacks are computed one sentence at a time with dropout off, so they are
    cached by text; the LM never sees gradients.
    """

    def __init__(self, lm: LMCheckpoint, k: int = 1, mode: Mode = Mode.TRAIN, cache: bool = True):
        _check_k(k, lm.config.num_layers)
        lm.params.freeze()
        self.lm = lm
        self.k = k
        self.mode = mode
        self._cache: dict[str, ContextStack] | None = {} if cache else None
        self._tensors = lm.params.tensors()

    @property
    def num_layers(self) -> int:
        return self.lm.config.num_layers

    @property
    def hidden_dim(self) -> int:
        return self.lm.config.hidden_dim

    @property
    def vocab(self):
        return self.lm.vocab

    @property
    def vocab_hash(self) -> str:
        return self.lm.vocab_hash

    def token_ids(self, text: str) -> list[int]:
        ids = [BOS_ID] + encode(self.lm.vocab, text) + [EOS_ID]
        if len(ids) > self.lm.config.max_positions:
            raise DataError(f"source of {len(ids)} tokens exceeds LM max_positions {self.lm.config.max_positions}")
        return ids

    def embed_stack(self, source_text: str) -> ContextStack:
        if self._cache is not None and source_text in self._cache:
            return self._cache[source_text]
        ids = torch.tensor(self.token_ids(source_text))
        with torch.no_grad():
            stack = ContextStack([h.detach() for h in self.lm.stack(ids).layers])
        if self._cache is not None:
            self._cache[source_text] = stack
        return stack

    def clear_cache(self):
        if self._cache is not None:
            self._cache.clear()

    def embed(self, source_text: str, p: float | None = None) -> torch.Tensor:
        """``select_train`` with the given draw in TRAIN mode, ``select_infer`` otherwise."""
        stack = self.embed_stack(source_text)
        if self.mode is Mode.TRAIN:
            if p is None:
                raise ValueError("TRAIN mode needs a draw p")
            return select_train(stack, self.k, p)
        return select_infer(stack, self.k)

    def embed_batch(self, texts: Sequence[str], p: float | Sequence[float] | None = None) -> list[torch.Tensor]:
        if p is None or isinstance(p, (float, int)):
            return [self.embed(t, p) for t in texts]
        return [self.embed(t, q) for t, q in zip(texts, p)]
