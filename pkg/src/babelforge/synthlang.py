"""Synthetic cipher-language generator.

A single probabilistic phrase grammar with topic-labeled content vocabulary
is rendered into n structurally isomorphic languages: a configurable
fraction of word types is shared verbatim, every other type passes through
a per-language bijective word substitution. Topic labels ride along as the
ground truth for transfer probes, and a geometric size profile creates the
high/low-resource asymmetry.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Document
from .util import spawn_rng

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def language_code(i: int) -> str:
    """ISO-639 private-use codes qaa..qtz."""
    if not 0 <= i < 20 * 26:
        raise ValueError("language index out of the private-use range")
    return f"q{chr(ord('a') + i // 26)}{chr(ord('a') + i % 26)}"


def geometric_profile(base: int, decay: float, n: int, floor: int = 0) -> list[int]:
    """Per-language sentence counts base*decay^i, optionally floored."""
    return [max(floor, round(base * decay ** i)) for i in range(n)]


@dataclass
class SyntheticLangSpec:
    n_langs: int
    lexicon_overlap: float
    size_profile: list[int]
    n_topics: int = 4
    nouns_per_topic: int = 14
    verbs_per_topic: int = 9
    adjs_per_topic: int = 7
    topic_purity: float = 0.92

    def __post_init__(self):
        if self.n_langs < 2:
            raise ValueError("need at least 2 languages")
        if not 0.0 <= self.lexicon_overlap <= 1.0:
            raise ValueError("lexicon_overlap must be in [0,1]")
        if len(self.size_profile) != self.n_langs:
            raise ValueError("size_profile length must equal n_langs")
        if self.n_topics < 2:
            raise ValueError("need at least 2 topics")


def _make_word(rng: np.random.Generator, used: set[str]) -> str:
    while True:
        n_syll = int(rng.integers(2, 5))
        word = "".join(
            _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n_syll))
        if rng.random() < 0.3:
            word += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        if word not in used:
            used.add(word)
            return word


class _Grammar:
    """Base lexicon plus templates; all sampling through explicit rngs."""

    def __init__(self, spec: SyntheticLangSpec, rng: np.random.Generator):
        used: set[str] = set()
        self.det = [_make_word(rng, used) for _ in range(3)]
        self.pron = [_make_word(rng, used) for _ in range(3)]
        self.prep = [_make_word(rng, used) for _ in range(4)]
        self.cop = [_make_word(rng, used) for _ in range(3)]
        self.nouns = [[_make_word(rng, used) for _ in range(spec.nouns_per_topic)]
                      for _ in range(spec.n_topics)]
        self.verbs = [[_make_word(rng, used) for _ in range(spec.verbs_per_topic)]
                      for _ in range(spec.n_topics)]
        self.adjs = [[_make_word(rng, used) for _ in range(spec.adjs_per_topic)]
                     for _ in range(spec.n_topics)]
        self.spec = spec

    def word_types(self) -> list[str]:
        types = self.det + self.pron + self.prep + self.cop
        for pools in (self.nouns, self.verbs, self.adjs):
            for pool in pools:
                types.extend(pool)
        return types

    def _zipf_pick(self, pool: list[str], rng) -> str:
        weights = 1.0 / np.arange(2, len(pool) + 2)
        weights /= weights.sum()
        return pool[int(rng.choice(len(pool), p=weights))]

    def _content_pool(self, pools: list[list[str]], topic: int, rng) -> list[str]:
        if rng.random() >= self.spec.topic_purity:
            others = [t for t in range(self.spec.n_topics) if t != topic]
            topic = int(others[rng.integers(len(others))])
        return pools[topic]

    def _np(self, topic: int, rng) -> list[str]:
        r = rng.random()
        noun = self._zipf_pick(self._content_pool(self.nouns, topic, rng), rng)
        if r < 0.5:
            return [self.det[rng.integers(3)], noun]
        if r < 0.8:
            adj = self._zipf_pick(self._content_pool(self.adjs, topic, rng), rng)
            return [self.det[rng.integers(3)], adj, noun]
        return [self.pron[rng.integers(3)]]

    def _vp(self, topic: int, rng) -> list[str]:
        r = rng.random()
        verb = self._zipf_pick(self._content_pool(self.verbs, topic, rng), rng)
        if r < 0.45:
            return [verb] + self._np(topic, rng)
        if r < 0.65:
            adj = self._zipf_pick(self._content_pool(self.adjs, topic, rng), rng)
            return [self.cop[rng.integers(3)], adj]
        if r < 0.85:
            return [verb, self.prep[rng.integers(4)]] + self._np(topic, rng)
        return [verb]

    def sentence(self, topic: int, rng) -> list[str]:
        return self._np(topic, rng) + self._vp(topic, rng)


def generate_languages(spec: SyntheticLangSpec, seed: int) -> list[Document]:
    """Render the shared grammar into n cipher languages (JSONL-compatible
    Documents carrying topic labels). Deterministic per (spec, seed)."""
    grammar = _Grammar(spec, spawn_rng(seed, "lexicon"))
    types = grammar.word_types()

    share_rng = spawn_rng(seed, "shared")
    n_shared = round(spec.lexicon_overlap * len(types))
    shared = set(np.array(sorted(types))[
        share_rng.choice(len(types), size=n_shared, replace=False)])

    used: set[str] = set(types)
    ciphers: list[dict[str, str]] = []
    for li in range(spec.n_langs):
        crng = spawn_rng(seed, "cipher", li)
        mapping = {}
        for word in sorted(types):
            mapping[word] = word if word in shared else _make_word(crng, used)
        ciphers.append(mapping)

    docs: list[Document] = []
    for li in range(spec.n_langs):
        lang = language_code(li)
        srng = spawn_rng(seed, "sentences", li)
        cipher = ciphers[li]
        for si in range(spec.size_profile[li]):
            topic = int(srng.integers(spec.n_topics))
            words = [cipher[w] for w in grammar.sentence(topic, srng)]
            docs.append(Document(
                text=" ".join(words) + " .",
                lang=lang,
                source_id=f"{lang}-{si:06d}",
                topic=f"t{topic}"))
    return docs


def word_type_sets(docs: list[Document]) -> dict[str, set[str]]:
    """Per-language surface word types, punctuation excluded."""
    out: dict[str, set[str]] = {}
    for doc in docs:
        out.setdefault(doc.lang, set()).update(
            w for w in doc.text.split() if w not in {".", "!", "?"})
    return out
