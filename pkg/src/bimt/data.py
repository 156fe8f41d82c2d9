"""Parallel corpora, dual-directional mixing, token-budget batching and MLM masking."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError
from .subword import BOS_ID, EOS_ID, MASK_ID, NUM_SPECIALS, PAD_ID, SubwordVocab, UNK_ID

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


class Direction(enum.Enum):
    FORWARD = "forward"
    SWAPPED = "swapped"


class Pair(NamedTuple):
    source: str
    target: str
    direction: Direction = Direction.FORWARD


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[Pair, ...]
    dropped: int = 0

    def __post_init__(self):
        for i, pair in enumerate(self.pairs):
            if not pair.source.strip() or not pair.target.strip():
                raise DataError(f"pair {i} has an empty side")

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self) -> list[str]:
        return [p.source for p in self.pairs]

    @property
    def targets(self) -> list[str]:
        return [p.target for p in self.pairs]

    def directions(self) -> set[Direction]:
        return {p.direction for p in self.pairs}

    @classmethod
    def from_pairs(cls, pairs, direction=Direction.FORWARD) -> "ParallelCorpus":
        return cls(tuple(Pair(s, t, direction) for s, t in pairs))

    def save_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for p in self.pairs:
                fh.write(f"{p.source}\t{p.target}\t{p.direction.value}\n")

    @classmethod
    def load_tsv(cls, path) -> "ParallelCorpus":
        pairs = []
        for n, line in enumerate(_read_lines(path), 1):
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path}:{n}: expected 3 tab-separated columns, got {len(cols)}")
            try:
                direction = Direction(cols[2])
            except ValueError:
                raise DataError(f"{path}:{n}: unknown direction {cols[2]!r}") from None
            pairs.append(Pair(cols[0], cols[1], direction))
        return cls(tuple(pairs))


def _read_lines(path) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return text.splitlines()


def read_text_lines(path) -> list[str]:
    return _read_lines(path)


def load_parallel(src_path, tgt_path) -> ParallelCorpus:
    src, tgt = _read_lines(src_path), _read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(f"line count mismatch {len(src)} vs {len(tgt)}")
    pairs = []
    dropped = 0
    for s, t in zip(src, tgt):
        s, t = s.strip(), t.strip()
        if not s or not t:
            dropped += 1
            continue
        pairs.append(Pair(s, t))
    if dropped:
        logger.warning("dropped %d blank pair(s) from %s / %s", dropped, src_path, tgt_path)
    return ParallelCorpus(tuple(pairs), dropped=dropped)


def make_dual_directional(corpus: ParallelCorpus, seed: int) -> ParallelCorpus:
    """Original pairs plus their swapped copies, jointly shuffled."""
    if any(p.direction is not Direction.FORWARD for p in corpus.pairs):
        raise DataError("corpus already contains swapped pairs; refusing to swap twice")
    mixed = list(corpus.pairs) + [Pair(p.target, p.source, Direction.SWAPPED) for p in corpus.pairs]
    order = np.random.default_rng(seed).permutation(len(mixed))
    return ParallelCorpus(tuple(mixed[i] for i in order))


def filter_direction(corpus: ParallelCorpus, direction: Direction) -> ParallelCorpus:
    kept = tuple(p for p in corpus.pairs if p.direction is direction)
    if not kept:
        raise DataError(f"no {direction.value} pairs in corpus")
    return ParallelCorpus(kept)


def plan_batches(lengths: Sequence[int], max_tokens: int) -> list[list[int]]:
    """Group indices into batches whose padded size rows * max_len stays within max_tokens.

    Indices are visited in (length, index) order and appended to the current
    batch while the padded size fits.
    """
    if max_tokens < 1:
        raise DataError("max_tokens must be positive")
    for i, n in enumerate(lengths):
        if n > max_tokens:
            raise DataError(f"sequence {i} has length {n} > max_tokens {max_tokens}")
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    batches: list[list[int]] = []
    current: list[int] = []
    width = 0
    for i in order:
        new_width = max(width, lengths[i])
        if current and (len(current) + 1) * new_width > max_tokens:
            batches.append(current)
            current, new_width = [], lengths[i]
        current.append(i)
        width = new_width
    if current:
        batches.append(current)
    return batches


def pad_rows(rows: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def batch_by_tokens(sequences: Sequence[Sequence[int]], max_tokens: int, pad_id: int = PAD_ID) -> list[np.ndarray]:
    plan = plan_batches([len(s) for s in sequences], max_tokens)
    return [pad_rows([sequences[i] for i in idx], pad_id) for idx in plan]


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray

    @property
    def num_masked(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


def mask_batch(input_ids, vocab: SubwordVocab, mask_prob: float = 0.15, rng_seed=None) -> MaskedBatch:
    """BERT-style dynamic masking: select, then 80% MASK / 10% random / 10% keep."""
    if not 0.0 <= mask_prob <= 1.0:
        raise DataError(f"mask_prob must be in [0, 1], got {mask_prob}")
    ids = np.asarray(input_ids, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    maskable = ids >= NUM_SPECIALS
    selected = (rng.random(ids.shape) < mask_prob) & maskable
    action = rng.random(ids.shape)
    random_tokens = rng.integers(NUM_SPECIALS, max(vocab.size, NUM_SPECIALS + 1), size=ids.shape)

    labels = np.where(selected, ids, IGNORE_INDEX)
    out = ids.copy()
    to_mask = selected & (action < 0.8)
    to_random = selected & (action >= 0.8) & (action < 0.9)
    out[to_mask] = MASK_ID
    out[to_random] = random_tokens[to_random]
    return MaskedBatch(out, labels, (ids != PAD_ID).astype(np.int64))


__all__ = [
    "BOS_ID", "EOS_ID", "PAD_ID", "UNK_ID", "IGNORE_INDEX", "Direction", "Pair", "ParallelCorpus",
    "MaskedBatch", "load_parallel", "make_dual_directional", "filter_direction", "plan_batches",
    "pad_rows", "batch_by_tokens", "mask_batch", "read_text_lines",
]
