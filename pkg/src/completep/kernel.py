"""Dense numeric substrate: deterministic init, normalization, activations, exact backward rules.

Everything operates on plain numpy arrays (row-major).  Precision is chosen
by the caller via dtype: float32 for training, float64 for diagnostics that
subtract nearly equal quantities.  Kernels are pure; callers treat inputs as
immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LN_EPS = 1e-5  # LayerNorm epsilon is fixed; only AdamW's epsilon is scaled.


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A value that must be finite is not; message carries the location."""


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream; (seed, stream_id) fully determines all draws."""

    seed: int
    stream_id: int

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))


def gaussian_init(stream: RngStream, shape, std: float, dtype=np.float32) -> np.ndarray:
    """I.i.d. N(0, std^2) entries; bit-identical for a fixed (seed, stream_id)."""
    if std < 0:
        raise ValueError(f"std must be >= 0, got {std}")
    if std == 0:
        return np.zeros(shape, dtype=dtype)
    # Draw in float64 then cast, so float32/float64 inits agree to rounding.
    values = stream.generator().standard_normal(size=shape, dtype=np.float64) * std
    return values.astype(dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps_ln: float = LN_EPS):
    """Normalize the last axis; returns (y, cache) with cache = (xhat, inv_std, gain)."""
    if eps_ln <= 0:
        raise ValueError("eps_ln must be > 0")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layernorm params {gain.shape}/{bias.shape} vs input {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps_ln)
    xhat = (x - mu) * inv_std
    y = xhat * gain + bias
    return y, (xhat, inv_std, gain)


def layernorm_bwd(cache, dy: np.ndarray):
    xhat, inv_std, gain = cache
    dgain = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def relu2_fwd(x: np.ndarray) -> np.ndarray:
    r = np.maximum(x, 0.0)
    return r * r


def relu2_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return 2.0 * np.maximum(x, 0.0) * dy


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise (last axis) softmax; -inf entries map to exactly zero."""
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_bwd(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    return p * (dp - np.sum(dp * p, axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross entropy; returns (loss, dlogits).

    logits: (..., vocab); targets: integer array matching the leading shape.
    """
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    m = flat.max(axis=-1, keepdims=True)
    z = flat - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = flat[np.arange(flat.shape[0]), t]
    loss = float(np.mean(lse - picked))

    p = np.exp(z - (lse - m[:, 0])[:, None])
    p[np.arange(flat.shape[0]), t] -= 1.0
    dlogits = (p / flat.shape[0]).reshape(logits.shape).astype(logits.dtype)
    return loss, dlogits


def alibi_bias(n_heads: int, seq_len: int, dtype=np.float32) -> np.ndarray:
    """Per-head linear distance penalties with the causal mask folded in.

    Head h (1-based) uses slope 2**(-8h/n_heads); bias[h-1, i, j] is
    -slope*(i-j) for j <= i and -inf for j > i.
    """
    if n_heads < 1 or seq_len < 1:
        raise ValueError("n_heads and seq_len must be >= 1")
    slopes = alibi_slopes(n_heads)
    i = np.arange(seq_len)
    dist = i[:, None] - i[None, :]  # i - j
    bias = -slopes[:, None, None] * dist[None, :, :].astype(np.float64)
    bias[:, dist < 0] = -np.inf
    return bias.astype(dtype)


def alibi_slopes(n_heads: int) -> np.ndarray:
    h = np.arange(1, n_heads + 1, dtype=np.float64)
    return 2.0 ** (-8.0 * h / n_heads)
