"""Vocabulary, tokenization, whole-word masking, attribute mining."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvl.data import DataConfig, generate_catalog
from fvl.errors import ConfigError, DataError
from fvl.lexicon import default_lexicon
from fvl.seeding import derive_rng
from fvl.text import (
    CLS_ID,
    IGNORE_LABEL,
    MASK_ID,
    N_SPECIALS,
    PAD_ID,
    UNK_ID,
    Vocabulary,
    build_vocab,
    detokenize,
    mask_tokens,
    mine_pseudo_attributes,
    smooth_targets,
    tokenize,
)


class TestVocabulary:
    def test_contains_corpus_words_and_specials(self):
        v = build_vocab(["red dress"])
        assert v.encode_word("red") >= N_SPECIALS
        assert v.encode_word("dress") >= N_SPECIALS
        assert len(v) == N_SPECIALS + 2

    def test_unseen_word_maps_to_unk(self):
        v = build_vocab(["red dress"])
        assert v.encode_word("plaid") == UNK_ID

    def test_save_load_identical_ids(self, tmp_path):
        v = build_vocab(["blue cotton tshirt", "red dress"])
        v.save(tmp_path / "vocab.json")
        w = Vocabulary.load(tmp_path / "vocab.json")
        assert w.id_to_token == v.id_to_token

    def test_empty_corpus_rejected(self):
        with pytest.raises(ConfigError):
            build_vocab([])

    def test_round_trip_up_to_whitespace(self):
        v = build_vocab(["Red   Dress", "spotty hat"])
        seq = tokenize(v, "  red DRESS ", 8)
        assert detokenize(v, seq.ids) == "red dress"


class TestTokenize:
    def test_cls_first_then_pad(self):
        v = build_vocab(["red dress"])
        seq = tokenize(v, "red dress", 8)
        assert seq.ids[0] == CLS_ID
        assert list(seq.ids[1:3]) == [v.encode_word("red"), v.encode_word("dress")]
        assert list(seq.ids[3:]) == [PAD_ID] * 5
        assert list(seq.attention_mask) == [1, 1, 1, 0, 0, 0, 0, 0]

    def test_empty_text_gives_cls_only(self):
        v = build_vocab(["red"])
        seq = tokenize(v, "   ", 4)
        assert seq.ids[0] == CLS_ID
        assert seq.length == 1
        assert seq.word_spans == []

    def test_truncation_keeps_whole_words(self):
        v = build_vocab(["a b c d e f g"])
        for t_max in range(1, 9):
            seq = tokenize(v, "a b c d e f g", t_max)
            # brute-force oracle over spans: all spans fully inside budget
            assert all(end <= t_max for _, end in seq.word_spans)
            assert seq.length == 1 + len(seq.word_spans)


class TestMaskTokens:
    def _long_seq(self, n_words=30):
        words = [f"w{i}" for i in range(n_words)]
        v = build_vocab([" ".join(words)])
        return v, tokenize(v, " ".join(words), n_words + 1)

    def test_masked_word_rate(self):
        v, seq = self._long_seq()
        rng = derive_rng(0, "rate")
        selected = total = 0
        while total < 10_000:
            m = mask_tokens(seq, 0.15, rng, v)
            selected += len(m.masked_spans)
            total += len(seq.word_spans)
        assert 0.13 <= selected / total <= 0.17

    def test_eighty_ten_ten_split(self):
        v, seq = self._long_seq()
        rng = derive_rng(1, "split")
        n_mask = n_rand = n_keep = 0
        for _ in range(2000):
            m = mask_tokens(seq, 0.15, rng, v)
            for start, end in m.masked_spans:
                new = m.ids[start:end]
                old = seq.ids[start:end]
                if (new == MASK_ID).all():
                    n_mask += 1
                elif (new == old).all():
                    n_keep += 1
                else:
                    n_rand += 1
        total = n_mask + n_rand + n_keep
        assert total > 5000
        assert abs(n_mask / total - 0.80) <= 0.02
        assert abs(n_rand / total - 0.10) <= 0.02
        assert abs(n_keep / total - 0.10) <= 0.02

    def test_cls_pad_only_sequence_gets_zero_masks(self):
        v = build_vocab(["red"])
        seq = tokenize(v, "", 6)
        m = mask_tokens(seq, 0.99, derive_rng(2), v)
        assert m.masked_spans == []
        assert (m.labels == IGNORE_LABEL).all()
        assert np.array_equal(m.ids, seq.ids)

    def test_specials_never_masked_or_labeled(self):
        v, seq = self._long_seq(10)
        rng = derive_rng(3)
        for _ in range(50):
            m = mask_tokens(seq, 0.9, rng, v)
            assert m.ids[0] == CLS_ID
            assert m.labels[0] == IGNORE_LABEL
            assert (m.ids[seq.attention_mask == 0] == PAD_ID).all()

    @given(st.integers(0, 10_000), st.floats(0.05, 0.95))
    @settings(max_examples=40, deadline=None)
    def test_whole_word_atomicity_and_label_placement(self, seed, p):
        words = ["alpha beta gamma delta epsilon zeta eta theta"]
        v = build_vocab(words)
        seq = tokenize(v, words[0], 12)
        m = mask_tokens(seq, p, derive_rng(seed), v)
        labeled = set(np.flatnonzero(m.labels != IGNORE_LABEL).tolist())
        for start, end in seq.word_spans:
            inside = set(range(start, end))
            assert inside <= labeled or not (inside & labeled)
        for start, end in m.masked_spans:
            assert (m.labels[start:end] == seq.ids[start:end]).all()
        # random replacements never produce specials
        assert not np.isin(m.ids[1:seq.length], [CLS_ID, PAD_ID]).any()


class TestMinePseudoAttributes:
    def test_frequency_threshold(self):
        lex = default_lexicon()
        corpus = ["cotton tshirt"] * 150 + ["silk blouse"] * 90
        attrs = mine_pseudo_attributes(corpus, lex, min_count=100)
        assert "cotton" in attrs.attributes
        assert "tshirt" in attrs.attributes
        assert "silk" not in attrs.attributes
        assert "blouse" not in attrs.attributes

    def test_matches_brute_force_count_oracle(self):
        cat = generate_catalog(DataConfig(n_products=300), seed=13)
        corpus = [p.caption for p in cat.products]
        mined = mine_pseudo_attributes(corpus, cat.lexicon, min_count=5)
        # oracle: plain dict counting
        counts = {}
        for c in corpus:
            for w in c.split():
                if cat.lexicon.is_content_word(w):
                    counts[w] = counts.get(w, 0) + 1
        expect = sorted((w for w, c in counts.items() if c > 5), key=lambda w: (-counts[w], w))
        assert mined.attributes == expect

    def test_fillers_never_included(self):
        lex = default_lexicon()
        corpus = ["features features features with with a"] * 200
        mined = mine_pseudo_attributes(corpus, lex, min_count=1)
        assert len(mined) == 0

    def test_mining_deterministic(self):
        lex = default_lexicon()
        corpus = ["red cotton tshirt", "red silk blouse"] * 10
        a = mine_pseudo_attributes(corpus, lex, 3)
        b = mine_pseudo_attributes(corpus, lex, 3)
        assert a.attributes == b.attributes

    def test_save_load(self, tmp_path):
        lex = default_lexicon()
        mined = mine_pseudo_attributes(["red cotton tshirt"] * 10, lex, 2)
        mined.save(tmp_path / "attrs.json")
        from fvl.text import PseudoAttributeSet

        loaded = PseudoAttributeSet.load(tmp_path / "attrs.json")
        assert loaded.attributes == mined.attributes
        assert loaded.index == mined.index


class TestSmoothTargets:
    def test_two_labels_half_half(self):
        t = smooth_targets({0, 1}, 4)
        assert np.allclose(t, [0.5, 0.5, 0.0, 0.0])

    def test_single_label_one_hot(self):
        t = smooth_targets({2}, 4)
        assert np.allclose(t, [0, 0, 1, 0])

    def test_empty_labels_all_zero(self):
        t = smooth_targets(set(), 4)
        assert (t == 0).all()

    def test_out_of_range_rejected(self):
        with pytest.raises(DataError):
            smooth_targets({4}, 4)

    @given(st.sets(st.integers(0, 19), max_size=12))
    @settings(max_examples=50, deadline=None)
    def test_mass_and_values(self, labels):
        t = smooth_targets(labels, 20)
        if labels:
            assert math.isclose(float(t.sum()), 1.0, rel_tol=1e-6)
            k = len(labels)
            assert set(np.unique(t)) <= {0.0, np.float32(1.0 / k)}
        else:
            assert (t == 0).all()
