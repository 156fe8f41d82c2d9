"""A small synthetic language pair with a fixed lexicon and systematic reordering.

Language A is SVO with pre-nominal adjectives. Language B puts adjectives after
the noun, moves the verb to the end, and marks noun gender on the determiner.
Verbs pick their objects from one noun class, and one verb in A is ambiguous:
its B translation depends on the class of its object.

Optional knobs make the lexicon more word-specific: Zipfian word frequencies,
per-noun adjective collocations, and verbs that accept only part of their
object class. Without them every noun of a class has the same distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_A_ONSETS = list("bdfgklmnprstv")
_A_VOWELS = list("aeiou")
_B_ONSETS = ["sch", "st", "kr", "br", "pf", "z", "w", "h", "g", "l", "r", "m", "n"]
_B_VOWELS = ["ei", "au", "ie", "a", "e", "o", "u", "ü", "ä"]
_B_CODAS = ["", "n", "r", "t", "ch", "st"]

NOUN_CLASSES = ("animal", "food", "place", "tool")


def _words(rng: np.random.Generator, n: int, make, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = make(rng)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def _a_word(rng, syllables):
    return "".join(rng.choice(_A_ONSETS) + rng.choice(_A_VOWELS) for _ in range(syllables))


def _b_word(rng, syllables):
    return "".join(rng.choice(_B_ONSETS) + rng.choice(_B_VOWELS) for _ in range(syllables - 1)) + \
        rng.choice(_B_ONSETS) + rng.choice(_B_VOWELS) + rng.choice(_B_CODAS)


@dataclass
class Entry:
    a: str
    b: str
    cls: str = ""
    gender: int = 0


class ToyLanguagePair:
    def __init__(self, nouns_per_class: int = 8, adjectives: int = 12, verbs_per_class: int = 3, seed: int = 0,
                 zipf: float = 0.0, collocations: int = 0, verb_objects: float = 1.0):
        rng = np.random.default_rng(seed)
        self.zipf = zipf
        taken: set[str] = set()
        self.nouns: dict[str, list[Entry]] = {}
        for cls in NOUN_CLASSES:
            a = _words(rng, nouns_per_class, lambda r: _a_word(r, int(r.integers(2, 4))), taken)
            b = _words(rng, nouns_per_class, lambda r: _b_word(r, int(r.integers(1, 3))), taken)
            self.nouns[cls] = [Entry(x, y, cls, int(rng.integers(2))) for x, y in zip(a, b)]
        a = _words(rng, adjectives, lambda r: _a_word(r, 2), taken)
        b = _words(rng, adjectives, lambda r: _b_word(r, 2), taken)
        self.adjectives = [Entry(x, y) for x, y in zip(a, b)]
        self.verbs: dict[str, list[Entry]] = {}
        for cls in NOUN_CLASSES:
            a = _words(rng, verbs_per_class, lambda r: _a_word(r, 2) + "s", taken)
            b = _words(rng, verbs_per_class, lambda r: _b_word(r, 2) + "t", taken)
            self.verbs[cls] = [Entry(x, y, cls) for x, y in zip(a, b)]
        # one ambiguous A verb, translated by object class
        amb = _words(rng, 1, lambda r: _a_word(r, 1) + "ks", taken)[0]
        self.ambiguous = {cls: Entry(amb, _words(rng, 1, lambda r: _b_word(r, 1) + "t", taken)[0], cls)
                          for cls in NOUN_CLASSES}
        self.preps = [Entry(x, y) for x, y in zip(_words(rng, 3, lambda r: _a_word(r, 1), taken),
                                                  _words(rng, 3, lambda r: _b_word(r, 1), taken))]
        self.det_a = ("ta", "nu")
        self.det_b = (("der", "die"), ("ein", "eine"))

        # word-specific preferences, drawn after the lexicon so it stays the same
        self.collocations: dict[str, list[int]] = {}
        if collocations:
            for entries in self.nouns.values():
                for e in entries:
                    self.collocations[e.a] = [int(i) for i in rng.choice(adjectives, collocations, replace=False)]
        self.objects: dict[str, list[int]] = {}
        if verb_objects < 1.0:
            n_obj = max(2, round(verb_objects * nouns_per_class))
            for entries in list(self.verbs.values()) + [list(self.ambiguous.values())[:1]]:
                for e in entries:
                    self.objects[e.a] = [int(i) for i in rng.choice(nouns_per_class, n_obj, replace=False)]

    def _pick(self, rng, n: int, allowed: list[int] | None = None) -> int:
        idx = allowed if allowed is not None else list(range(n))
        if not self.zipf:
            return idx[int(rng.integers(len(idx)))]
        # rank by position in the lexicon so frequencies are fixed per word
        w = 1.0 / (np.asarray(idx, dtype=float) + 1.0) ** self.zipf
        return idx[int(rng.choice(len(idx), p=w / w.sum()))]

    def _np(self, rng, cls, allowed=None):
        noun = self.nouns[cls][self._pick(rng, len(self.nouns[cls]), allowed)]
        det = int(rng.integers(2))
        adj = None
        if rng.random() < 0.5:
            prefs = self.collocations.get(noun.a)
            if prefs and rng.random() < 0.9:
                adj = self.adjectives[prefs[int(rng.integers(len(prefs)))]]
            else:
                adj = self.adjectives[self._pick(rng, len(self.adjectives))]
        a = [self.det_a[det]] + ([adj.a] if adj else []) + [noun.a]
        b = [self.det_b[det][noun.gender], noun.b] + ([adj.b] if adj else [])
        return a, b

    def sample(self, rng: np.random.Generator) -> tuple[str, str]:
        obj_cls = NOUN_CLASSES[int(rng.integers(len(NOUN_CLASSES)))]
        if rng.random() < 0.2:
            verb = self.ambiguous[obj_cls]
        else:
            verb = self.verbs[obj_cls][int(rng.integers(len(self.verbs[obj_cls])))]
        subj_a, subj_b = self._np(rng, "animal")
        obj_a, obj_b = self._np(rng, obj_cls, self.objects.get(verb.a))
        a = subj_a + [verb.a] + obj_a
        b = subj_b + obj_b
        if rng.random() < 0.3:
            prep = self.preps[int(rng.integers(len(self.preps)))]
            pa, pb = self._np(rng, "place")
            a += [prep.a] + pa
            b += [prep.b] + pb
        b.append(verb.b)
        return " ".join(a), " ".join(b)

    def corpus(self, n: int, seed: int, exclude: set[tuple[str, str]] | None = None,
               unique: bool = True) -> list[tuple[str, str]]:
        rng = np.random.default_rng(seed)
        seen = set(exclude or ())
        out = []
        while len(out) < n:
            pair = self.sample(rng)
            if unique and pair in seen:
                continue
            seen.add(pair)
            out.append(pair)
        return out


    def monolingual(self, n: int, seed: int, exclude: set[tuple[str, str]] | None = None) -> list[str]:
        """``n`` sentences per language from independent samples, mixed and shuffled."""
        pairs = self.corpus(2 * n, seed, exclude)
        lines = [a for a, _ in pairs[:n]] + [b for _, b in pairs[n:]]
        order = np.random.default_rng(seed).permutation(len(lines))
        return [lines[i] for i in order]


def make_task(n_train: int, n_dev: int = 0, seed: int = 0, lexicon_seed: int = 0, **lexicon):
    """Train and held-out dev pairs; dev never repeats a training pair."""
    lang = ToyLanguagePair(seed=lexicon_seed, **lexicon)
    train = lang.corpus(n_train, seed)
    dev = lang.corpus(n_dev, seed + 1, exclude=set(train)) if n_dev else []
    return train, dev


def write_task(out_dir, n_train: int, n_dev: int, seed: int = 0):
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, dev = make_task(n_train, n_dev, seed)
    for name, pairs in (("train", train), ("dev", dev)):
        (out / f"{name}.src").write_text("".join(a + "\n" for a, _ in pairs), encoding="utf-8")
        (out / f"{name}.tgt").write_text("".join(b + "\n" for _, b in pairs), encoding="utf-8")
    mixed = [s for pair in train for s in pair]
    (out / "mono.txt").write_text("".join(s + "\n" for s in mixed), encoding="utf-8")
    return out
