"""Corpus construction: ingestion, language identification, per-language
character-LM perplexity filtering, paragraph dedup, and statistics.

Documents travel as JSON lines ({"text","lang","source_id"} plus optional
scoring fields), UTF-8, NFC-normalized.
"""

from __future__ import annotations

import json
import logging
import math
import re
import unicodedata
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .util import spawn_rng

log = logging.getLogger(__name__)

# Sentence boundary: newline, or terminal punctuation followed by whitespace.
_SENT_BOUNDARY = re.compile(r"\n|(?<=[.!?。؟])[ \t]+")
_LINE_WS = re.compile(r"[ \t\f\v ]+")


def normalize_document(text: str) -> str:
    """NFC, collapse horizontal whitespace within lines, drop empty lines."""
    text = unicodedata.normalize("NFC", text)
    lines = []
    for line in text.split("\n"):
        line = _LINE_WS.sub(" ", line).strip()
        if line:
            lines.append(line)
    return "\n".join(lines)


@dataclass
class Document:
    """One unit of raw text with its language tag and quality scores."""

    text: str
    lang: str
    source_id: str
    langid_conf: float | None = None
    ppl: float | None = None
    topic: str | None = None
    drop_reason: str | None = None

    def __post_init__(self):
        if not normalize_document(self.text):
            raise ValueError(f"document {self.source_id!r}: empty after normalization")
        if self.langid_conf is not None and not 0.0 <= self.langid_conf <= 1.0:
            raise ValueError("langid_conf outside [0,1]")
        if self.ppl is not None and not self.ppl > 0:
            raise ValueError("ppl must be positive")


def read_jsonl(path: str) -> list[Document]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            docs.append(Document(
                text=normalize_document(rec["text"]),
                lang=rec.get("lang", ""),
                source_id=str(rec["source_id"]),
                langid_conf=rec.get("langid_conf"),
                ppl=rec.get("ppl"),
                topic=rec.get("topic"),
            ))
    return docs


def write_jsonl(docs: list[Document], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for doc in docs:
            rec = {"text": doc.text, "lang": doc.lang, "source_id": doc.source_id}
            if doc.langid_conf is not None:
                rec["langid_conf"] = round(doc.langid_conf, 6)
            if doc.ppl is not None:
                rec["ppl"] = round(doc.ppl, 6)
            if doc.topic is not None:
                rec["topic"] = doc.topic
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Language identification: hashed character n-gram multinomial logistic model.
# ---------------------------------------------------------------------------

@dataclass
class LangIdModel:
    ngram_range: tuple[int, int]
    feature_dim: int
    weights: np.ndarray          # [feature_dim, n_languages]
    labels: list[str]

    def __post_init__(self):
        if self.weights.shape != (self.feature_dim, len(self.labels)):
            raise ValueError("weights shape inconsistent with feature_dim/labels")


def _ngram_features(text: str, ngram_range: tuple[int, int], feature_dim: int):
    """Hashed n-gram counts, L1-normalized so length does not scale logits."""
    lo, hi = ngram_range
    counts: Counter[int] = Counter()
    for n in range(lo, hi + 1):
        for i in range(len(text) - n + 1):
            gram = text[i:i + n]
            counts[zlib.crc32(gram.encode("utf-8")) % feature_dim] += 1
    if not counts:
        return np.empty(0, dtype=np.int64), np.empty(0)
    idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    val = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    return idx, val / val.sum()


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def train_langid(labeled_docs: list[tuple[str, str]],
                 ngram_range: tuple[int, int] = (1, 4),
                 feature_dim: int = 2 ** 18,
                 epochs: int = 8,
                 lr: float = 2.0,
                 seed: int = 0) -> LangIdModel:
    """SGD-trained multinomial logistic classifier over hashed char n-grams.

    Deterministic given seed and input order. Empty-after-normalization
    texts are skipped (counted in a warning).
    """
    labels = sorted({lang for _, lang in labeled_docs})
    if len(labels) < 2:
        raise ValueError("need >=2 classes")
    lang_index = {lang: i for i, lang in enumerate(labels)}

    feats, targets = [], []
    skipped = 0
    for text, lang in labeled_docs:
        text = normalize_document(text)
        if not text:
            skipped += 1
            continue
        idx, val = _ngram_features(text, ngram_range, feature_dim)
        feats.append((idx, val))
        targets.append(lang_index[lang])
    if skipped:
        log.warning("train_langid: skipped %d empty document(s)", skipped)
    if not feats:
        raise ValueError("no non-empty training documents")

    # Averaged SGD (averaged-perceptron trick): the returned weights are the
    # mean over all iterates, which cancels the end-of-run oscillation on
    # symmetric data. avg = w - u/T with u accumulating t-weighted updates.
    weights = np.zeros((feature_dim, len(labels)))
    u = np.zeros_like(weights)
    rng = spawn_rng(seed, "langid")
    t = 0
    for _ in range(epochs):
        for j in rng.permutation(len(feats)):
            t += 1
            idx, val = feats[j]
            probs = _softmax(val @ weights[idx])
            probs[targets[j]] -= 1.0
            delta = -lr * np.outer(val, probs)
            weights[idx] += delta
            u[idx] += t * delta
    averaged = weights - u / t
    return LangIdModel(ngram_range=ngram_range, feature_dim=feature_dim,
                       weights=averaged, labels=labels)


def identify(model: LangIdModel, text: str) -> tuple[str, float]:
    """Predict (language, confidence). Texts shorter than the minimum n-gram
    yield ("und", 0.0); empty text is an error."""
    text = normalize_document(text)
    if not text:
        raise ValueError("cannot identify empty text")
    if len(text) < model.ngram_range[0]:
        return "und", 0.0
    idx, val = _ngram_features(text, model.ngram_range, model.feature_dim)
    probs = _softmax(val @ model.weights[idx])
    best = int(np.argmax(probs))
    return model.labels[best], float(probs[best])


def predict_distribution(model: LangIdModel, text: str) -> np.ndarray:
    """Full softmax distribution over model.labels (sums to 1)."""
    text = normalize_document(text)
    if not text:
        raise ValueError("cannot identify empty text")
    idx, val = _ngram_features(text, model.ngram_range, model.feature_dim)
    if idx.size == 0:
        return np.full(len(model.labels), 1.0 / len(model.labels))
    return _softmax(val @ model.weights[idx])


def save_langid(model: LangIdModel, path: str) -> None:
    np.savez_compressed(path,
                        ngram_lo=model.ngram_range[0], ngram_hi=model.ngram_range[1],
                        feature_dim=model.feature_dim,
                        weights=model.weights.astype(np.float32),
                        labels=np.array(model.labels))


def load_langid(path: str) -> LangIdModel:
    with np.load(path, allow_pickle=False) as z:
        return LangIdModel(
            ngram_range=(int(z["ngram_lo"]), int(z["ngram_hi"])),
            feature_dim=int(z["feature_dim"]),
            weights=z["weights"].astype(np.float64),
            labels=[str(x) for x in z["labels"]],
        )


# ---------------------------------------------------------------------------
# Character n-gram LM with Witten-Bell interpolation, for quality filtering.
# ---------------------------------------------------------------------------

UNK_CHAR = "\x00"  # reserved slot for characters never seen in training


@dataclass
class CharLM:
    """Interpolated character n-gram model.

    counts[k] maps a length-k context string to a Counter of next chars;
    totals/distinct cache the Witten-Bell denominators. Every character in
    the alphabet (plus one unseen-character slot) gets nonzero probability.
    """

    order: int
    counts: list[dict]
    totals: list[dict] = field(repr=False)
    distinct: list[dict] = field(repr=False)
    alphabet: frozenset = frozenset()

    def prob(self, ch: str, history: str) -> float:
        if ch not in self.alphabet:
            ch = UNK_CHAR
        p = 1.0 / (len(self.alphabet) + 1)  # uniform base incl. unseen slot
        for k in range(0, self.order):
            h = history[len(history) - k:] if k else ""
            if len(history) < k:
                break
            total = self.totals[k].get(h, 0)
            if total == 0:
                continue
            t = self.distinct[k][h]
            c = self.counts[k][h].get(ch, 0)
            p = (c + t * p) / (total + t)
        return p

    def logprob(self, text: str) -> float:
        lp = 0.0
        for i, ch in enumerate(text):
            history = text[max(0, i - self.order + 1):i]
            lp += math.log(self.prob(ch, history))
        return lp

    def perplexity(self, text: str) -> float:
        """Per-character perplexity (length-normalized)."""
        if not text:
            raise ValueError("cannot score empty text")
        return math.exp(-self.logprob(text) / len(text))


def train_char_lm(docs: list[Document], order: int = 5) -> CharLM:
    """Count n-grams per document (contexts never cross document boundaries)."""
    if order < 2:
        raise ValueError("order must be >= 2")
    if not docs:
        raise ValueError("need at least one document")
    counts: list[dict] = [{} for _ in range(order)]
    alphabet: set[str] = set()
    for doc in docs:
        text = doc.text
        alphabet.update(text)
        for i, ch in enumerate(text):
            for k in range(0, order):
                if i - k < 0:
                    break
                h = text[i - k:i]
                counts[k].setdefault(h, Counter())[ch] += 1
    totals = [{h: sum(c.values()) for h, c in level.items()} for level in counts]
    distinct = [{h: len(c) for h, c in level.items()} for level in counts]
    return CharLM(order=order, counts=counts, totals=totals, distinct=distinct,
                  alphabet=frozenset(alphabet))


def _score_chunk(args):
    docs, lms = args
    return [lms[d.lang].perplexity(d.text) if d.lang in lms else None for d in docs]


def score_and_filter(docs: list[Document],
                     lm_by_lang: dict[str, CharLM],
                     keep_fraction: float,
                     jobs: int = 1) -> tuple[list[Document], list[Document]]:
    """Annotate per-character perplexity and keep the best keep_fraction
    of each language (lowest perplexity; ties broken by source_id).

    Selection is by deterministic sort; the returned lists preserve input
    order, so parallel and serial runs are byte-identical.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")

    if jobs > 1 and len(docs) > 1:
        chunks = [docs[i::jobs] for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_score_chunk, [(c, lm_by_lang) for c in chunks]))
        ppls: list[float | None] = [None] * len(docs)
        for offset, chunk_ppls in enumerate(results):
            ppls[offset::jobs] = chunk_ppls
    else:
        ppls = _score_chunk((docs, lm_by_lang))

    by_lang: dict[str, list[int]] = {}
    dropped_idx: set[int] = set()
    for i, (doc, ppl) in enumerate(zip(docs, ppls)):
        if ppl is None:
            doc.drop_reason = "no-lm"
            dropped_idx.add(i)
        else:
            doc.ppl = ppl
            by_lang.setdefault(doc.lang, []).append(i)

    for lang, indices in by_lang.items():
        ranked = sorted(indices, key=lambda i: (docs[i].ppl, docs[i].source_id))
        n_keep = math.ceil(keep_fraction * len(ranked))
        for i in ranked[n_keep:]:
            docs[i].drop_reason = "ppl"
            dropped_idx.add(i)

    kept = [d for i, d in enumerate(docs) if i not in dropped_idx]
    dropped = [d for i, d in enumerate(docs) if i in dropped_idx]
    return kept, dropped


def _paragraph_key(paragraph: str) -> int:
    norm = _LINE_WS.sub(" ", paragraph).strip().casefold()
    return zlib.crc32(norm.encode("utf-8"))


def dedup(docs: list[Document]) -> list[Document]:
    """Exact paragraph-level dedup after whitespace+case normalization.

    First occurrence wins; documents reduced to zero paragraphs are dropped;
    order is stable.
    """
    seen: set[int] = set()
    out = []
    for doc in docs:
        kept_paragraphs = []
        for para in doc.text.split("\n"):
            key = _paragraph_key(para)
            if key in seen:
                continue
            seen.add(key)
            kept_paragraphs.append(para)
        if kept_paragraphs:
            doc.text = "\n".join(kept_paragraphs)
            out.append(doc)
    return out


# ---------------------------------------------------------------------------
# Statistics.
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    lang: str
    n_docs: int = 0
    n_sentences: int = 0
    n_tokens: int = 0
    bytes: int = 0


def count_sentences(text: str) -> int:
    return sum(1 for seg in _SENT_BOUNDARY.split(text) if seg.strip())


def compute_stats(docs: list[Document]) -> list[CorpusStats]:
    """Per-language document/sentence/token/byte counts, sorted by language.

    Tokens are whitespace-split words (pre-subword); additive under corpus
    concatenation.
    """
    acc: dict[str, CorpusStats] = {}
    for doc in docs:
        st = acc.setdefault(doc.lang, CorpusStats(lang=doc.lang))
        st.n_docs += 1
        st.n_sentences += count_sentences(doc.text)
        st.n_tokens += len(doc.text.split())
        st.bytes += len(doc.text.encode("utf-8"))
    return [acc[lang] for lang in sorted(acc)]


def write_stats_csv(stats: list[CorpusStats], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("lang,n_docs,n_sentences,n_tokens,bytes\n")
        for st in stats:
            f.write(f"{st.lang},{st.n_docs},{st.n_sentences},{st.n_tokens},{st.bytes}\n")
