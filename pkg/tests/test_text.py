import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alignve.encoder import EncoderConfig, init_attenc_params
from alignve.tensor import ParamStore
from alignve.text import (
    MAX_LEN,
    EmbeddingFormatError,
    EmbeddingTable,
    EmptyHypothesisError,
    embed,
    encode_hypothesis,
    load_embeddings,
    positional_encoding,
    tokenize,
    write_embeddings,
)


def pe_scalar(pos, k, d):
    i = k // 2
    angle = pos / 10000 ** (2 * i / d)
    return math.sin(angle) if k % 2 == 0 else math.cos(angle)


def text_params(cfg, d_h, seed=0):
    store = ParamStore()
    init_attenc_params(store, "text", d_h, cfg, np.random.default_rng(seed))
    return store


class TestTokenize:
    def test_example_sentence(self):
        assert tokenize("Two women are holding packages.") == ["two", "women", "are", "holding", "packages", "."]

    @pytest.mark.parametrize("text", ["", "   ", "\t\n"])
    def test_empty(self, text):
        with pytest.raises(EmptyHypothesisError):
            tokenize(text)

    def test_truncation(self):
        words = " ".join(f"w{i}" for i in range(100))
        assert MAX_LEN == 64
        assert tokenize(words) == [f"w{i}" for i in range(64)]
        assert len(tokenize(words, max_len=10)) == 10

    def test_leading_and_trailing_punctuation(self):
        assert tokenize('"Hello," she said!?') == ['"', "hello", ",", '"', "she", "said", "!", "?"]

    def test_inner_punctuation_kept(self):
        assert tokenize("a well-known don't") == ["a", "well-known", "don't"]

    def test_only_punctuation(self):
        assert tokenize("...") == [".", ".", "."]

    @settings(max_examples=100, deadline=None)
    @given(st.text(min_size=1, max_size=80))
    def test_tokens_are_lowercase_and_bounded(self, text):
        try:
            tokens = tokenize(text)
        except EmptyHypothesisError:
            assert text.split() == []
            return
        assert 1 <= len(tokens) <= MAX_LEN
        assert all(t == t.lower() and t and not any(c.isspace() for c in t) for t in tokens)


class TestEmbed:
    def test_known_rows(self, small_table):
        out = embed(["women", "two"], small_table)
        np.testing.assert_array_equal(out[0], small_table.vectors[1])
        np.testing.assert_array_equal(out[1], small_table.vectors[0])

    def test_oov_zero(self, small_table):
        out = embed(["zebra", "two"], small_table)
        np.testing.assert_array_equal(out[0], np.zeros(8))

    def test_shape(self):
        table = EmbeddingTable({f"t{i}": i for i in range(5)}, np.ones((5, 300), np.float32))
        assert embed([f"t{i}" for i in range(5)], table).shape == (5, 300)

    def test_table_is_read_only(self, small_table):
        with pytest.raises(ValueError):
            small_table.vectors[0, 0] = 1.0

    def test_vocab_index_range(self):
        with pytest.raises(ValueError):
            EmbeddingTable({"a": 3}, np.zeros((2, 4), np.float32))


class TestPositionalEncoding:
    def test_row_zero(self):
        pe = positional_encoding(1, 10)
        np.testing.assert_array_equal(pe[0, 0::2], 0)
        np.testing.assert_array_equal(pe[0, 1::2], 1)

    def test_pos1_dim0(self):
        assert positional_encoding(2, 300)[1, 0] == pytest.approx(math.sin(1), abs=1e-12)
        assert positional_encoding(2, 300)[1, 0] == pytest.approx(0.841471, abs=1e-6)

    def test_scalar_oracle(self):
        pe = positional_encoding(64, 300)
        ref = np.array([[pe_scalar(p, k, 300) for k in range(300)] for p in range(64)])
        assert np.abs(pe - ref).max() < 1e-6
        np.testing.assert_array_equal(pe, positional_encoding(64, 300))

    def test_range(self):
        pe = positional_encoding(64, 300)
        assert pe.min() >= -1 and pe.max() <= 1

    def test_odd_dimension(self):
        with pytest.raises(ValueError):
            positional_encoding(3, 7)


class TestEncodeHypothesis:
    cfg = EncoderConfig(d=8, heads=2, layers=1)

    def test_shape_and_determinism(self, small_table):
        p = text_params(self.cfg, 8)
        a = encode_hypothesis("Two women are holding packages.", small_table, p, self.cfg)
        b = encode_hypothesis("Two women are holding packages.", small_table, p, self.cfg)
        assert a.shape == (6, 8)
        assert a.data.tobytes() == b.data.tobytes()

    def test_single_token(self, small_table):
        out = encode_hypothesis("women", small_table, text_params(self.cfg, 8), self.cfg)
        assert out.shape == (1, 8) and np.isfinite(out.data).all()

    def test_not_permutation_equivariant(self, small_table):
        p = text_params(self.cfg, 8)
        ab = encode_hypothesis("two women", small_table, p, self.cfg).data
        ba = encode_hypothesis("women two", small_table, p, self.cfg).data
        assert not np.allclose(ab[::-1], ba, atol=1e-5)

    def test_empty_propagates(self, small_table):
        with pytest.raises(EmptyHypothesisError):
            encode_hypothesis("  ", small_table, text_params(self.cfg, 8), self.cfg)


class TestLoadEmbeddings:
    def test_round_trip(self, tmp_path, small_table):
        write_embeddings(tmp_path / "e.txt", small_table)
        loaded = load_embeddings(tmp_path / "e.txt")
        assert loaded.vocab == small_table.vocab
        np.testing.assert_array_equal(loaded.vectors, small_table.vectors)

    def test_duplicates_keep_first(self, tmp_path):
        (tmp_path / "e.txt").write_text("a 1 2\nb 3 4\na 5 6\n")
        with pytest.warns(UserWarning, match="duplicate"):
            table = load_embeddings(tmp_path / "e.txt")
        assert len(table) == 2
        np.testing.assert_array_equal(table.vectors[table.vocab["a"]], [1, 2])

    @pytest.mark.parametrize("content, where", [
        ("a 1 2\nb 3\n", ":2:"),
        ("a 1 x\n", ":1:"),
        ("a 1 nan\n", ":1:"),
        ("a\n", ":1:"),
        ("", "no embeddings"),
    ])
    def test_malformed(self, tmp_path, content, where):
        (tmp_path / "e.txt").write_text(content)
        with pytest.raises(EmbeddingFormatError, match=where):
            load_embeddings(tmp_path / "e.txt")

    def test_invalid_utf8(self, tmp_path):
        (tmp_path / "e.txt").write_bytes(b"\xff\xfe 1 2\n")
        with pytest.raises(EmbeddingFormatError):
            load_embeddings(tmp_path / "e.txt")
