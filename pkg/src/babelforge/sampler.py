"""Smoothed language sampling, per-language token streams, and masked-batch
assembly. Language tags are bookkeeping only and never reach the model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tokenizer import UnigramVocab, viterbi_encode
from .util import spawn_rng

log = logging.getLogger(__name__)


@dataclass
class SamplingPolicy:
    """Raw language shares p_i = n_i/sum(n) and their exponentially smoothed
    counterpart q_i = p_i^alpha / sum_j p_j^alpha."""

    langs: list[str]
    n_sentences: np.ndarray
    alpha: float
    p: np.ndarray
    q: np.ndarray

    def q_for(self, lang: str) -> float:
        return float(self.q[self.langs.index(lang)])


def smoothed_distribution(n_sentences: dict[str, int], alpha: float) -> SamplingPolicy:
    """Languages with zero sentences keep q=0; alpha=0 flattens to uniform
    over the non-empty languages; alpha=1 reproduces the raw shares."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    langs = list(n_sentences)
    counts = np.array([n_sentences[l] for l in langs], dtype=np.float64)
    if (counts < 0).any():
        raise ValueError("negative sentence count")
    total = counts.sum()
    if total <= 0:
        raise ValueError("all languages empty")
    p = counts / total
    q = np.zeros_like(p)
    pos = p > 0
    q[pos] = p[pos] ** alpha
    q /= q.sum()
    return SamplingPolicy(langs=langs, n_sentences=counts.astype(np.int64),
                          alpha=alpha, p=p, q=q)


@dataclass
class MaskedBatch:
    tokens: np.ndarray              # int64 [B,S]
    labels: np.ndarray              # int64 [B,S], -1 at unmasked positions
    lang_tags: list[str]            # per row, never an input feature
    attn_mask: np.ndarray           # bool [B,S]

    def masked_labels(self) -> np.ndarray:
        return self.labels[self.labels >= 0]


class LanguageStream:
    """Restartable deterministic stream of length-S id sequences for one
    language.

    Per epoch: shuffle documents by (seed, lang, epoch), concatenate their
    encodings with </s> separators, chunk the stream into (S-1)-token
    windows, prefix each with <s>, and pad the final partial window.
    """

    def __init__(self, texts: list[str], vocab: UnigramVocab, seq_len: int,
                 seed: int, lang: str = ""):
        if seq_len < 8:
            raise ValueError("seq_len must be >= 8")
        self.vocab = vocab
        self.seq_len = seq_len
        self.seed = seed
        self.lang = lang
        self.epoch = 0
        self._encoded = [viterbi_encode(vocab, t) for t in texts]
        self._iter = self._sequences(0) if texts else iter(())

    def _sequences(self, epoch: int):
        order = spawn_rng(self.seed, "stream", self.lang, epoch).permutation(
            len(self._encoded))
        stream: list[int] = []
        for i in order:
            stream.extend(self._encoded[i])
            stream.append(self.vocab.eos_id)
        window = self.seq_len - 1
        for start in range(0, len(stream), window):
            chunk = stream[start:start + window]
            seq = np.full(self.seq_len, self.vocab.pad_id, dtype=np.int64)
            seq[0] = self.vocab.bos_id
            seq[1:1 + len(chunk)] = chunk
            yield seq

    def __iter__(self):
        return self._sequences(self.epoch)

    def next_sequence(self) -> np.ndarray:
        """Next window; exhausted epochs restart with a reshuffle."""
        if not self._encoded:
            raise ValueError("empty stream")
        try:
            return next(self._iter)
        except StopIteration:
            self.epoch += 1
            log.debug("stream %s: entering epoch %d", self.lang, self.epoch)
            self._iter = self._sequences(self.epoch)
            return next(self._iter)


def language_stream(texts: list[str], vocab: UnigramVocab, seq_len: int,
                    rng_seed: int, lang: str = ""):
    """Single-epoch iterator of id sequences (empty corpus yields nothing)."""
    if not texts:
        return iter(())
    return iter(LanguageStream(texts, vocab, seq_len, rng_seed, lang))


def pack_sequences(texts: list[str], vocab: UnigramVocab, seq_len: int) -> list[np.ndarray]:
    """Deterministic packing in the given text order (no shuffle); used by
    evaluation so metrics depend only on content, never on language tags."""
    stream: list[int] = []
    for text in texts:
        stream.extend(viterbi_encode(vocab, text))
        stream.append(vocab.eos_id)
    window = seq_len - 1
    out = []
    for start in range(0, len(stream), window):
        chunk = stream[start:start + window]
        seq = np.full(seq_len, vocab.pad_id, dtype=np.int64)
        seq[0] = vocab.bos_id
        seq[1:1 + len(chunk)] = chunk
        out.append(seq)
    return out


def apply_masking(seq: np.ndarray, mask_prob: float, rng: np.random.Generator,
                  vocab: UnigramVocab):
    """BERT-style masking: each eligible position is selected independently
    with mask_prob; selected positions become <mask> 80% of the time, a
    uniform random vocab id 10%, and stay unchanged 10%. Labels hold the
    original ids at selected positions and -1 elsewhere."""
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError("mask_prob must be in [0,1]")
    protected = (seq == vocab.bos_id) | (seq == vocab.eos_id) | (seq == vocab.pad_id)
    select_draw = rng.random(seq.shape)
    branch_draw = rng.random(seq.shape)
    random_ids = rng.integers(0, vocab.size, size=seq.shape)

    selected = (~protected) & (select_draw < mask_prob)
    masked = seq.copy()
    masked[selected & (branch_draw < 0.8)] = vocab.mask_id
    use_random = selected & (branch_draw >= 0.8) & (branch_draw < 0.9)
    masked[use_random] = random_ids[use_random]
    labels = np.where(selected, seq, -1)
    return masked, labels


def build_batch(streams_by_lang: dict[str, LanguageStream], policy: SamplingPolicy,
                batch_size: int, seq_len: int, mask_prob: float,
                rng: np.random.Generator) -> MaskedBatch:
    """Each row draws its language from q, takes the next stream window, and
    is masked in draw order through the single batch RNG (rows never mix
    documents across languages)."""
    missing = [l for l, qi in zip(policy.langs, policy.q) if qi > 0
               and l not in streams_by_lang]
    if missing:
        raise ValueError(f"no stream for languages {missing}")
    active = [(l, q) for l, q in zip(policy.langs, policy.q)
              if q > 0 and streams_by_lang[l]._encoded]
    if not active:
        raise ValueError("all streams empty")
    langs = [l for l, _ in active]
    weights = np.array([q for _, q in active])
    cum = np.cumsum(weights / weights.sum())
    cum[-1] = 1.0

    vocab = streams_by_lang[langs[0]].vocab
    tokens = np.empty((batch_size, seq_len), dtype=np.int64)
    labels = np.empty((batch_size, seq_len), dtype=np.int64)
    attn = np.empty((batch_size, seq_len), dtype=bool)
    tags = []
    for row in range(batch_size):
        lang = langs[int(np.searchsorted(cum, rng.random(), side="right"))]
        seq = streams_by_lang[lang].next_sequence()
        attn[row] = seq != vocab.pad_id  # from the pre-masking sequence
        masked, row_labels = apply_masking(seq, mask_prob, rng, vocab)
        tokens[row] = masked
        labels[row] = row_labels
        tags.append(lang)
    return MaskedBatch(tokens=tokens, labels=labels, lang_tags=tags, attn_mask=attn)
