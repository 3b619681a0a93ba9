"""Deterministic token sources."""

import numpy as np
import pytest

from completep.data import FileByteSource, MarkovByteSource, make_source


def test_markov_batch_shapes_and_shift():
    src = MarkovByteSource(vocab=64, seed=0)
    tokens, targets = src.batch(3, 4, 16)
    assert tokens.shape == (4, 16) and targets.shape == (4, 16)
    np.testing.assert_array_equal(tokens[:, 1:], targets[:, :-1])
    assert tokens.min() >= 0 and tokens.max() < 64


def test_markov_determinism_per_step():
    a = MarkovByteSource(vocab=32, seed=1).batch(5, 2, 8)
    b = MarkovByteSource(vocab=32, seed=1).batch(5, 2, 8)
    c = MarkovByteSource(vocab=32, seed=1).batch(6, 2, 8)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])
    d = MarkovByteSource(vocab=32, seed=2).batch(5, 2, 8)
    assert not np.array_equal(a[0], d[0])


def test_markov_has_bigram_structure():
    """The same predecessor token should strongly prefer a few successors."""
    src = MarkovByteSource(vocab=16, seed=0)
    tokens, targets = src.batch(0, 64, 256)
    prev = tokens.reshape(-1)
    nxt = targets.reshape(-1)
    counts = np.zeros((16, 16))
    np.add.at(counts, (prev, nxt), 1)
    rows = counts[counts.sum(axis=1) > 100]
    top_share = (rows.max(axis=1) / rows.sum(axis=1)).mean()
    assert top_share > 0.5  # uniform would give ~1/16


def test_markov_validation():
    with pytest.raises(ValueError):
        MarkovByteSource(vocab=1)


def test_file_source(tmp_path):
    path = tmp_path / "corpus.bin"
    payload = bytes(range(256)) * 10
    path.write_bytes(payload)
    src = FileByteSource(str(path), seed=0)
    tokens, targets = src.batch(0, 3, 12)
    assert tokens.shape == (3, 12)
    np.testing.assert_array_equal(tokens[:, 1:], targets[:, :-1])
    # Windows are contiguous byte runs (mod wraparound): successor = +1 mod 256.
    np.testing.assert_array_equal((tokens[:, :-1] + 1) % 256, tokens[:, 1:])
    # Deterministic per step.
    again, _ = FileByteSource(str(path), seed=0).batch(0, 3, 12)
    np.testing.assert_array_equal(tokens, again)


def test_file_source_too_small(tmp_path):
    path = tmp_path / "tiny.bin"
    path.write_bytes(b"x")
    with pytest.raises(ValueError):
        FileByteSource(str(path))


def test_make_source_dispatch(tmp_path):
    assert isinstance(make_source("synthetic", 256, 0), MarkovByteSource)
    path = tmp_path / "f.bin"
    path.write_bytes(b"hello world")
    assert isinstance(make_source(str(path), 256, 0), FileByteSource)
