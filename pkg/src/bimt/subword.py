"""WordPiece-style subword vocabulary trained by frequency-based pair merging.

Words are split on whitespace. The first piece of a word is stored bare and
every word-internal piece carries the ``##`` continuation prefix, so ``aab``
starts out as ``a ##a ##b``. Training repeatedly merges the most frequent
adjacent pair (ties go to the lexicographically smallest pair) until the
vocabulary reaches the requested size.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError

PAD, UNK, BOS, EOS, MASK = "<pad>", "<unk>", "<s>", "</s>", "<mask>"
SPECIALS = (PAD, UNK, BOS, EOS, MASK)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)
NUM_SPECIALS = len(SPECIALS)
CONTINUATION = "##"


@dataclass(frozen=True)
class SubwordVocab:
    tokens: tuple[str, ...]
    # training history only; identity is the token inventory
    merges: tuple[tuple[str, str], ...] = field(default=(), compare=False)
    continuation_prefix: str = CONTINUATION
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:NUM_SPECIALS]) != SPECIALS:
            raise DataError(f"specials must occupy indices 0-4 as {SPECIALS}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            dupes = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise DataError(f"duplicate tokens in vocabulary: {dupes[:5]}")
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def sha256(self) -> str:
        """Identity of the token inventory, used to pair checkpoints with vocabularies."""
        h = hashlib.sha256()
        for tok in self.tokens:
            h.update(tok.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SubwordVocab":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read vocab file {path}: {exc}") from exc
        return cls(tuple(text.split("\n")[:-1]) if text.endswith("\n") else tuple(text.split("\n")))


def _split_word(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple(CONTINUATION + ch for ch in word[1:])


def _join(left: str, right: str) -> str:
    return left + right[len(CONTINUATION):]


def _merge_word(pieces: tuple[str, ...], pair: tuple[str, str], merged: str) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(pieces):
        if i + 1 < len(pieces) and pieces[i] == pair[0] and pieces[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(pieces[i])
            i += 1
    return tuple(out)


def train_vocab(corpus_lines: Iterable[str], target_size: int) -> SubwordVocab:
    word_freq = Counter(w for line in corpus_lines for w in line.split())
    if not word_freq:
        raise DataError("cannot train a vocabulary on an empty corpus")

    words = {w: _split_word(w) for w in word_freq}
    alphabet = sorted({p for pieces in words.values() for p in pieces})
    minimum = len(alphabet) + NUM_SPECIALS
    if target_size < minimum:
        raise DataError(
            f"target_size {target_size} is below the minimum {minimum} "
            f"({len(alphabet)} alphabet symbols + {NUM_SPECIALS} specials)"
        )

    tokens = list(SPECIALS) + alphabet
    known = set(tokens)
    merges = []
    while len(tokens) < target_size:
        pair_freq = Counter()
        for w, pieces in words.items():
            f = word_freq[w]
            for a, b in zip(pieces, pieces[1:]):
                pair_freq[(a, b)] += f
        if not pair_freq:
            break
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = _join(*best)
        merges.append(best)
        words = {w: _merge_word(p, best, merged) for w, p in words.items()}
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return SubwordVocab(tuple(tokens), tuple(merges))


def _segment(vocab: SubwordVocab, word: str) -> list[int]:
    ids = []
    start = 0
    while start < len(word):
        prefix = CONTINUATION if start else ""
        end = len(word)
        while end > start and prefix + word[start:end] not in vocab.index:
            end -= 1
        if end == start:
            ids.append(UNK_ID)
            start += 1
        else:
            ids.append(vocab.index[prefix + word[start:end]])
            start = end
    return ids


def encode(vocab: SubwordVocab, text: str) -> list[int]:
    """Greedy longest-match segmentation. BOS/EOS are left to the caller."""
    ids: list[int] = []
    for word in text.split():
        ids.extend(_segment(vocab, word))
    return ids


def tokenize(vocab: SubwordVocab, text: str) -> list[str]:
    return [vocab.tokens[i] for i in encode(vocab, text)]


def decode(vocab: SubwordVocab, ids: Sequence[int]) -> str:
    words: list[str] = []
    for pos, i in enumerate(ids):
        i = int(i)
        if not 0 <= i < vocab.size:
            raise DataError(f"token id {i} at index {pos} is out of range for vocab of size {vocab.size}")
        if i < NUM_SPECIALS:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and len(tok) > len(CONTINUATION):
            piece = tok[len(CONTINUATION):]
            if words:
                words[-1] += piece
            else:
                words.append(piece)
        else:
            words.append(tok)
    return " ".join(words)
