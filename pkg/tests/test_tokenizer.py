import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from babelforge.tokenizer import (BOUNDARY, REPLACEMENT, SPECIALS, UnigramVocab,
                                  decode, load_vocab, mark_boundaries, normalize,
                                  save_vocab, train_unigram, viterbi_encode)
from babelforge.util import spawn_rng


def make_vocab(pieces: dict[str, float]) -> UnigramVocab:
    singles = {c for p in pieces for c in p}
    items = dict(pieces)
    for c in singles:
        items.setdefault(c, min(pieces.values()) - 5.0)
    return UnigramVocab(pieces=sorted(items.items()),
                        required_chars=frozenset(singles))


def brute_force_best(vocab: UnigramVocab, text: str) -> list[int]:
    """Exhaustive-enumeration oracle with the documented tie rule: highest
    fixed-point score, then fewest pieces, then leftmost-longest. Integer
    sums are exact and order-independent, so ties are unambiguous."""
    from babelforge.tokenizer import quantize_logp

    marked = mark_boundaries(text)
    n = len(marked)
    known = {p for p, _ in vocab.pieces if len(p) == 1}
    q_unk = quantize_logp(min(lp for _, lp in vocab.pieces) - 10.0)
    qlogp = {pid: quantize_logp(lp)
             for (piece, lp), pid in zip(vocab.pieces,
                                         range(len(vocab.specials), vocab.size))}

    def segmentations(i):
        if i == n:
            yield []
            return
        found = False
        for j in range(i + 1, n + 1):
            pid = vocab.piece_id(marked[i:j])
            if pid is not None:
                found = True
                for rest in segmentations(j):
                    yield [(pid, j - i, qlogp[pid])] + rest
        if marked[i] not in known and not found:
            for rest in segmentations(i + 1):
                yield [(vocab.unk_id, 1, q_unk)] + rest

    best = None
    best_key = None
    for seg in segmentations(0):
        key = (sum(q for _, _, q in seg), -len(seg),
               tuple(length for _, length, _ in seg))
        if best_key is None or key > best_key:
            best_key = key
            best = seg
    return [pid for pid, _, _ in best]


class TestTrainUnigram:
    def test_single_symbol_corpus(self):
        # EM on "aaaa" is hand-solvable: long all-a pieces absorb the mass
        vocab = train_unigram(["aaaa"] * 20, target_v=len(SPECIALS) + 1 + 2)
        pieces = dict(vocab.pieces)
        multi = [p for p in pieces if len(p) > 1]
        assert multi and all(set(p) == {"a"} for p in multi)
        assert max(pieces[p] for p in multi) > pieces["a"]

    def test_merged_piece_survives(self):
        # target allows exactly one multi-char piece; "ab" must win it, and
        # an independent likelihood evaluation confirms the vocab with "ab"
        # beats the characters-only alternative
        vocab = train_unigram(["ab"] * 30, target_v=len(SPECIALS) + 2 + 1)
        pieces = dict(vocab.pieces)
        assert "ab" in pieces

        def corpus_ll(probs: dict[str, float]) -> float:
            # P("ab") = p(ab) + p(a)p(b), exact enumeration
            total = probs.get("ab", 0.0) + probs["a"] * probs["b"]
            return 30 * math.log(total)

        with_ab = {p: math.exp(lp) for p, lp in vocab.pieces}
        chars_only = {"a": 0.5, "b": 0.5}
        assert corpus_ll(with_ab) > corpus_ll(chars_only)

    def test_vocab_too_small_errors(self):
        with pytest.raises(ValueError, match="too small"):
            train_unigram(["abcdefghij"], target_v=3)

    def test_em_loglikelihood_monotone(self):
        rng = spawn_rng(5, "emcorpus")
        alphabet = "abcdef"
        corpus = ["".join(alphabet[rng.integers(6)] for _ in range(rng.integers(4, 20)))
                  for _ in range(80)]
        vocab = train_unigram(corpus, target_v=len(SPECIALS) + 6 + 20, em_iters=5)
        for round_lls in vocab.train_ll_history:
            for prev, cur in zip(round_lls, round_lls[1:]):
                assert cur >= prev - 1e-9 * abs(prev)

    def test_probability_mass_normalized(self):
        vocab = train_unigram(["the cat sat", "the mat", "a cat"] * 10,
                              target_v=40)
        assert vocab.prob_mass() == pytest.approx(1.0, abs=1e-4)

    def test_full_character_coverage(self):
        corpus = ["zebra quilt", "jumph vexed"] * 5
        vocab = train_unigram(corpus, target_v=60)
        marked_chars = set("".join(mark_boundaries(s) for s in corpus))
        singles = {p for p, _ in vocab.pieces if len(p) == 1}
        assert marked_chars <= singles

    def test_deterministic_vocab_file(self, tmp_path):
        corpus = ["some words repeat", "words repeat often", "often some"] * 7
        va = train_unigram(corpus, target_v=50)
        vb = train_unigram(corpus, target_v=50)
        pa, pb = str(tmp_path / "a.tsv"), str(tmp_path / "b.tsv")
        save_vocab(va, pa)
        save_vocab(vb, pb)
        assert open(pa, "rb").read() == open(pb, "rb").read()

    def test_target_size_respected(self):
        corpus = ["many different words here to learn pieces from"] * 10
        vocab = train_unigram(corpus, target_v=30)
        assert vocab.size <= 30


class TestViterbi:
    def test_merged_piece_beats_chars(self):
        vocab = make_vocab({"a": -1.0, "b": -1.0, "ab": -1.5})
        ids = viterbi_encode(vocab, "ab")
        assert ids == brute_force_best(vocab, "ab")
        assert [vocab.id_to_piece(i) for i in ids] == ["ab"]

    def test_single_char_only(self):
        vocab = make_vocab({"a": -1.0})
        ids = viterbi_encode(vocab, "a")
        assert [vocab.id_to_piece(i) for i in ids] == ["a"]

    def test_unseen_char_maps_to_unk(self):
        vocab = make_vocab({"a": -1.0, "b": -1.2})
        ids = viterbi_encode(vocab, "aZb")
        assert ids[1] == vocab.unk_id
        assert ids[0] != vocab.unk_id and ids[2] != vocab.unk_id

    def test_tie_prefers_fewer_pieces(self):
        # "abc": [-2 + -2] vs ["abc" alone -4]: equal score, fewer pieces wins
        vocab = make_vocab({"ab": -2.0, "c": -2.0, "abc": -4.0, "a": -2.0,
                            "bc": -2.0, "b": -2.0})
        ids = viterbi_encode(vocab, "abc")
        assert [vocab.id_to_piece(i) for i in ids] == ["abc"]

    def test_tie_prefers_leftmost_longest(self):
        # equal score, equal count: [ab, c] beats [a, bc]
        vocab = make_vocab({"ab": -2.0, "c": -2.0, "a": -2.0, "bc": -2.0})
        ids = viterbi_encode(vocab, "abc")
        assert [vocab.id_to_piece(i) for i in ids] == ["ab", "c"]

    def test_matches_brute_force_random(self):
        rng = spawn_rng(17, "oracle")
        alphabet = "abcd"
        for trial in range(200):
            n_multi = int(rng.integers(3, 12))
            pieces = {}
            for _ in range(n_multi):
                length = int(rng.integers(2, 5))
                p = "".join(alphabet[rng.integers(4)] for _ in range(length))
                pieces[p] = float(np.round(-rng.uniform(0.5, 6.0), 2))
            for c in alphabet:
                pieces[c] = float(np.round(-rng.uniform(0.5, 6.0), 2))
            vocab = UnigramVocab(pieces=sorted(pieces.items()),
                                 required_chars=frozenset(alphabet))
            text = "".join(alphabet[rng.integers(4)]
                           for _ in range(rng.integers(1, 13)))
            assert viterbi_encode(vocab, text) == brute_force_best(vocab, text), \
                f"trial {trial}: {text!r}"

    def test_empty_text(self):
        vocab = make_vocab({"a": -1.0})
        assert viterbi_encode(vocab, "") == []


class TestDecode:
    def test_round_trip(self):
        vocab = train_unigram(["hello world", "world hello"] * 5, target_v=40)
        ids = viterbi_encode(vocab, "hello world")
        assert decode(vocab, ids) == "hello world"

    def test_unk_becomes_replacement(self):
        vocab = make_vocab({"a": -1.0})
        ids = viterbi_encode(vocab, "aZa")
        assert decode(vocab, ids) == f"a{REPLACEMENT}a"

    def test_empty_ids(self):
        vocab = make_vocab({"a": -1.0})
        assert decode(vocab, []) == ""

    def test_unknown_id_errors(self):
        vocab = make_vocab({"a": -1.0})
        with pytest.raises(ValueError, match="unknown id"):
            decode(vocab, [vocab.size])

    def test_specials_render_empty(self):
        vocab = make_vocab({"a": -1.0})
        assert decode(vocab, [vocab.bos_id, vocab.eos_id, vocab.pad_id]) == ""


class TestVocabFile:
    def test_header_and_specials_first(self, tmp_path):
        vocab = train_unigram(["abc abd"] * 5, target_v=20)
        path = str(tmp_path / "v.tsv")
        save_vocab(vocab, path)
        lines = open(path, encoding="utf-8").read().splitlines()
        assert lines[0] == f"#unigram-vocab v1 size={vocab.size}"
        assert [l.split("\t")[0] for l in lines[1:6]] == list(SPECIALS)

    def test_load_round_trip(self, tmp_path):
        vocab = train_unigram(["some text for the file"] * 6, target_v=35)
        path = str(tmp_path / "v.tsv")
        save_vocab(vocab, path)
        loaded = load_vocab(path)
        assert loaded.pieces == vocab.pieces
        assert loaded.size == vocab.size
        text = "some file"
        assert viterbi_encode(loaded, text) == viterbi_encode(vocab, text)

    def test_duplicate_pieces_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            UnigramVocab(pieces=[("a", -1.0), ("a", -2.0)],
                         required_chars=frozenset("a"))


class TestNormalization:
    def test_nfc_and_whitespace(self):
        assert normalize("étude   deux\n") == "étude deux"
        assert mark_boundaries("a b") == f"a{BOUNDARY}b"

    def test_boundary_round_trip_via_decode(self):
        vocab = train_unigram(["x y z"] * 5, target_v=20)
        assert decode(vocab, viterbi_encode(vocab, "  x   y  z ")) == "x y z"


@settings(max_examples=60, deadline=None)
@given(st.text(alphabet="abc d", min_size=0, max_size=30))
def test_round_trip_property(text):
    vocab = test_round_trip_property.vocab
    assert decode(vocab, viterbi_encode(vocab, text)) == normalize(text)


test_round_trip_property.vocab = train_unigram(
    ["abc cab dab", "ba dc ad", "a b c d"] * 4, target_v=40)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10 ** 9))
def test_viterbi_optimality_property(case_seed):
    rng = np.random.default_rng(case_seed)
    alphabet = "abc"
    pieces = {c: float(np.round(-rng.uniform(0.5, 4.0), 2)) for c in alphabet}
    for _ in range(rng.integers(2, 8)):
        p = "".join(alphabet[rng.integers(3)] for _ in range(rng.integers(2, 4)))
        pieces[p] = float(np.round(-rng.uniform(0.5, 6.0), 2))
    vocab = UnigramVocab(pieces=sorted(pieces.items()),
                         required_chars=frozenset(alphabet))
    text = "".join(alphabet[rng.integers(3)] for _ in range(rng.integers(1, 12)))
    assert viterbi_encode(vocab, text) == brute_force_best(vocab, text)
