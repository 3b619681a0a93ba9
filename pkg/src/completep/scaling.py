"""Compute-optimal run construction: parameter/FLOP accounting, the
batch-size power law, token budgeting, N:L shape grids, power-law fits,
and the loss-increase / FLOP-savings metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def nonemb_params(n: int, l: int) -> int:
    """Non-embedding parameter count 12 * N^2 * L."""
    if n < 0 or l < 0:
        raise ValueError("n and l must be nonnegative")
    return 12 * n * n * l


def total_params(n: int, l: int, vocab: int) -> int:
    """Adds the untied embedding and unembedding matrices (2 * vocab * N)."""
    if vocab < 1:
        raise ValueError("vocab must be >= 1")
    return nonemb_params(n, l) + 2 * vocab * n


def tokens_for_tpp(p_total: int, tpp: float = 20.0) -> int:
    if p_total < 1:
        raise ValueError("p_total must be >= 1")
    return round(tpp * p_total)


def batch_size_from_flops(flops: float) -> int:
    """B = max(32, 0.7857 * F^0.1527 - 306.8), rounded to the nearest
    multiple of 8 (exact half-multiples round up)."""
    if flops <= 0:
        raise ValueError("flops must be > 0")
    b = max(32.0, 0.7857 * flops**0.1527 - 306.8)
    return int(math.floor(b / 8.0 + 0.5)) * 8


def flops_per_token_forward(n: int, l: int, vocab: int, seq_len: int, d_head: int = 64) -> float:
    """Forward FLOPs per token for the counted architecture.

    Term list (multiply-accumulates count 2 FLOPs each):
      - embedding as a one-hot matmul:      2*V*N
      - per layer, QKV and output proj:     2*4*N^2
      - per layer, attention logits:        2*T*N   (full-window upper count)
      - per layer, attention value mixing:  2*T*N
      - per layer, MLP up+down (4N wide):   2*8*N^2
      - per layer, biases + ReLU^2:         17*N
      - LayerNorms (2 per layer + final):   8*N each
      - unembedding:                        2*V*N
    Frozen by golden tests; backward is counted as 2x forward.
    """
    per_layer = 2 * (4 * n * n) + 2 * (2 * seq_len * n) + 2 * (8 * n * n) + 17 * n + 2 * 8 * n
    return 2 * vocab * n + l * per_layer + 8 * n + 2 * vocab * n


def flops_detailed(n: int, l: int, vocab: int, seq_len: int, tokens: float, d_head: int = 64) -> float:
    """Training FLOPs: forward + backward (2x forward) over all tokens."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    return 3.0 * flops_per_token_forward(n, l, vocab, seq_len, d_head) * tokens


def flops_6nd(params: float, tokens: float) -> float:
    """The coarse 6*N*D approximation."""
    return 6.0 * params * tokens


@dataclass(frozen=True)
class PowerLawFit:
    """X_hat(F) = (F / a) ** -b, fitted by least squares in log space."""

    a: float
    b: float
    log_rss: float
    n_points: int

    def predict(self, flops: float) -> float:
        return (flops / self.a) ** -self.b

    def invert(self, loss: float) -> float:
        """FLOPs needed on the fitted frontier to reach ``loss``."""
        return self.a * loss ** (-1.0 / self.b)


def fit_power_law(points: list[tuple[float, float]]) -> PowerLawFit:
    """Fit ln X = -b (ln F - ln a) by ordinary least squares."""
    if len(points) < 2:
        raise ValueError("need at least 2 points to fit a power law")
    f = np.array([p[0] for p in points], dtype=np.float64)
    x = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(f <= 0) or np.any(x <= 0):
        raise ValueError("all flops and loss values must be > 0")
    lf, lx = np.log(f), np.log(x)
    if np.ptp(lf) == 0:
        raise ValueError("degenerate fit: all FLOP values are equal")
    slope, intercept = np.polyfit(lf, lx, 1)
    b = -slope
    if b <= 0:
        raise ValueError(f"fitted exponent is not positive (b={b}); loss must decrease with FLOPs")
    a = math.exp(intercept / b)
    resid = lx - (slope * lf + intercept)
    return PowerLawFit(a=a, b=b, log_rss=float(resid @ resid), n_points=len(points))


def loss_increase(x: float, x_hat: float) -> float:
    """Relative loss increase d = (X - X_hat) / X against a reference fit."""
    if x <= 0:
        raise ValueError("loss must be > 0")
    return (x - x_hat) / x


def flop_savings(d_base: float, d_new: float, b: float) -> float:
    """FLOP savings of the reference frontier over a baseline:
    1 - (1 - (d_base - d_new)) ** (-1/b)."""
    if b <= 0:
        raise ValueError("b must be > 0")
    return 1.0 - (1.0 - (d_base - d_new)) ** (-1.0 / b)


@dataclass(frozen=True)
class ShapePoint:
    n: int
    l: int
    p_nonemb: int
    p_total: int
    tokens: int
    train_flops: float
    steps: int
    batch_size: int

    @property
    def n_over_l(self) -> float:
        return self.n / self.l


def shape_point(n: int, l: int, *, vocab: int, seq_len: int, tpp: float = 20.0) -> ShapePoint:
    p_ne = nonemb_params(n, l)
    p_tot = total_params(n, l, vocab)
    tokens = tokens_for_tpp(p_tot, tpp)
    flops = flops_detailed(n, l, vocab, seq_len, tokens)
    batch = batch_size_from_flops(flops)
    steps = math.ceil(tokens / (batch * seq_len))
    return ShapePoint(n, l, p_ne, p_tot, tokens, flops, steps, batch)


def nl_grid(
    p_target: float,
    *,
    d_head: int = 64,
    count: int | None = None,
    tolerance: float = 0.06,
    vocab: int = 50257,
    seq_len: int = 2048,
    tpp: float = 20.0,
) -> list[ShapePoint]:
    """Shapes (N multiple of d_head, L = round(P/(12 N^2))) holding the
    non-embedding parameter count near ``p_target``.

    Returns points sorted by N:L with no duplicate N; ``count`` subsamples
    evenly in log(N:L) while keeping both endpoints.
    """
    if p_target < 12 * d_head * d_head:
        raise ValueError(f"p_target {p_target} infeasible for d_head {d_head}")
    points: list[ShapePoint] = []
    n = d_head
    n_max = int(math.sqrt(p_target * (1 + tolerance) / 12.0)) + d_head
    while n <= n_max:
        l = round(p_target / (12.0 * n * n))
        if l >= 1:
            p_ne = nonemb_params(n, l)
            if abs(p_ne - p_target) / p_target <= tolerance:
                points.append(shape_point(n, l, vocab=vocab, seq_len=seq_len, tpp=tpp))
        n += d_head
    points.sort(key=lambda p: p.n_over_l)
    if count is not None and count < len(points):
        if count < 2:
            raise ValueError("count must be >= 2")
        idx = np.unique(np.round(np.linspace(0, len(points) - 1, count)).astype(int))
        points = [points[i] for i in idx]
    return points
