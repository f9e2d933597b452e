"""Corpus loading, vocabulary, and window sampling."""

import numpy as np
import pytest

from tapernorm.data import (
    Vocab,
    build_default_corpus,
    load_corpus,
    sample_batch,
    sequential_batches,
    split_stream,
)
from tapernorm.errors import InputError


class TestVocabAndLoading:
    def test_abab(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("abab")
        stream, vocab = load_corpus(str(p))
        assert vocab.size == 2
        assert len(stream) == 4
        np.testing.assert_array_equal(stream, [0, 1, 0, 1])

    def test_round_trip(self, tmp_path):
        text = "the quick brown fox.\nJumps! 123"
        p = tmp_path / "t.txt"
        p.write_text(text)
        stream, vocab = load_corpus(str(p))
        assert vocab.decode(stream) == text

    def test_ids_contiguous_and_sorted(self, tmp_path):
        p = tmp_path / "t.txt"
        p.write_text("cba")
        _, vocab = load_corpus(str(p))
        assert vocab.chars == "abc"
        np.testing.assert_array_equal(vocab.encode("abc"), [0, 1, 2])

    def test_empty_file_rejected(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_text("")
        with pytest.raises(InputError):
            load_corpus(str(p))

    def test_missing_file_rejected(self):
        with pytest.raises(InputError):
            load_corpus("/nonexistent/corpus.txt")

    def test_unknown_char_rejected(self):
        vocab = Vocab("ab")
        with pytest.raises(InputError):
            vocab.encode("abc")


class TestDefaultCorpus:
    def test_deterministic(self, tmp_path):
        a = tmp_path / "a.txt"
        b = tmp_path / "b.txt"
        build_default_corpus(str(a), n_bytes=20_000)
        build_default_corpus(str(b), n_bytes=20_000)
        assert a.read_bytes() == b.read_bytes()

    def test_size_and_vocab(self, corpus):
        stream, vocab = corpus
        assert len(stream) >= 1_000_000
        assert 25 <= vocab.size <= 40  # lowercase letters plus punctuation


class TestSampling:
    def test_shift_property(self):
        stream = np.arange(100, dtype=np.int32)
        rng = np.random.default_rng(0)
        inputs, targets = sample_batch(stream, 4, 10, rng)
        np.testing.assert_array_equal(targets, inputs + 1)

    def test_ids_in_vocab(self, corpus):
        stream, vocab = corpus
        inputs, targets = sample_batch(stream, 8, 64, np.random.default_rng(1))
        assert inputs.min() >= 0 and inputs.max() < vocab.size
        assert targets.min() >= 0 and targets.max() < vocab.size

    def test_seeded_windows_reproduce(self, corpus):
        stream, _ = corpus
        a = sample_batch(stream, 4, 32, np.random.default_rng(7))
        b = sample_batch(stream, 4, 32, np.random.default_rng(7))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_histogram_matches_stream(self):
        rng = np.random.default_rng(2)
        stream = rng.choice(10, size=60_000, p=np.linspace(1, 3, 10) / np.linspace(1, 3, 10).sum())
        stream = stream.astype(np.int32)
        sampler = np.random.default_rng(3)
        counts = np.zeros(10)
        n_windows, seq = 10_000, 16
        for _ in range(n_windows // 100):
            inputs, _ = sample_batch(stream, 100, seq, sampler)
            counts += np.bincount(inputs.reshape(-1), minlength=10)
        empirical = counts / counts.sum()
        reference = np.bincount(stream, minlength=10) / len(stream)
        assert np.abs(empirical / reference - 1.0).max() <= 0.05

    def test_stream_too_short(self):
        with pytest.raises(InputError):
            sample_batch(np.arange(10, dtype=np.int32), 2, 10, np.random.default_rng(0))


class TestSplitAndEval:
    def test_split_fractions(self):
        stream = np.arange(1000, dtype=np.int32)
        train, val = split_stream(stream, 0.1)
        assert len(train) == 900 and len(val) == 100
        np.testing.assert_array_equal(np.concatenate([train, val]), stream)

    def test_bad_fraction(self):
        with pytest.raises(InputError):
            split_stream(np.arange(100, dtype=np.int32), 1.5)

    def test_sequential_batches_deterministic_and_shifted(self):
        stream = np.arange(200, dtype=np.int32)
        batches = list(sequential_batches(stream, batch_size=3, seq_len=10, max_batches=2))
        assert batches
        for inputs, targets in batches:
            np.testing.assert_array_equal(targets, inputs + 1)
        again = list(sequential_batches(stream, batch_size=3, seq_len=10, max_batches=2))
        np.testing.assert_array_equal(batches[0][0], again[0][0])
