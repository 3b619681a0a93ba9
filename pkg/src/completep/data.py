"""Deterministic token sources for desk-scale language-model runs.

The synthetic source is a fixed-seed first-order Markov chain over the byte
vocabulary.  Its transition rows are sparse-ish Dirichlet draws, so the
stream has strong bigram structure and the training loss moves well below
ln(vocab) within a few hundred steps (a uniform stream would leave
learning-rate sweeps flat).  Generator parameters are frozen here:
Dirichlet concentration 0.05, uniform initial state.
"""

from __future__ import annotations

import numpy as np

from .kernel import RngStream

DIRICHLET_CONCENTRATION = 0.05

# Stream ids for data draws live far above any parameter stream id.
_TRANSITION_STREAM = 1 << 40
_BATCH_STREAM_BASE = 1 << 41


class MarkovByteSource:
    """Fixed-seed Markov chain; ``batch(step)`` is a pure function of
    (seed, vocab, step, batch_size, seq_len)."""

    def __init__(self, vocab: int = 256, seed: int = 0):
        if vocab < 2:
            raise ValueError("vocab must be >= 2")
        self.vocab = vocab
        self.seed = seed
        rng = RngStream(seed, _TRANSITION_STREAM).generator()
        probs = rng.dirichlet(np.full(vocab, DIRICHLET_CONCENTRATION), size=vocab)
        self._cum = np.cumsum(probs, axis=1)
        self._cum[:, -1] = 1.0  # guard against rounding in searchsorted

    def batch(self, step: int, batch_size: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        """(tokens, targets), each (batch_size, seq_len); targets are shifted by one."""
        rng = RngStream(self.seed, _BATCH_STREAM_BASE + step).generator()
        seq = np.empty((batch_size, seq_len + 1), dtype=np.int64)
        seq[:, 0] = rng.integers(0, self.vocab, size=batch_size)
        u = rng.random((batch_size, seq_len))
        for t in range(seq_len):
            rows = self._cum[seq[:, t]]
            seq[:, t + 1] = np.minimum(
                (rows < u[:, t, None]).sum(axis=1), self.vocab - 1
            )
        return seq[:, :-1], seq[:, 1:]


class FileByteSource:
    """Byte-level tokens from a file; batches are deterministic strided windows."""

    def __init__(self, path: str, seed: int = 0):
        with open(path, "rb") as f:
            raw = np.frombuffer(f.read(), dtype=np.uint8)
        if raw.size < 2:
            raise ValueError(f"data file {path!r} must contain at least 2 bytes")
        self.tokens = raw.astype(np.int64)
        self.vocab = 256
        self.seed = seed

    def batch(self, step: int, batch_size: int, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.tokens.size
        window = seq_len + 1
        rng = RngStream(self.seed, _BATCH_STREAM_BASE + step).generator()
        starts = rng.integers(0, n, size=batch_size)
        idx = (starts[:, None] + np.arange(window)[None, :]) % n
        seq = self.tokens[idx]
        return seq[:, :-1], seq[:, 1:]


def make_source(data: str, vocab: int, seed: int):
    """``data`` is "synthetic" or a file path."""
    if data == "synthetic":
        return MarkovByteSource(vocab=vocab, seed=seed)
    return FileByteSource(data, seed=seed)
