"""Analytic toy residual networks used by the depth-scaling diagnostics.

Two models:

* ``ToyLinearResNet`` -- blocks h <- h + c * W2 @ W1 @ h with no
  nonlinearity, so the Taylor expansion of a block in its own parameters
  terminates at second order.  Used by the laziness experiment.
* ``ToyReluResMLP``   -- blocks h <- h + c * W @ relu(h); its large-width
  norm recursion has a closed form, giving a signal-propagation oracle.

The depth prefactor c is L**-alpha, or 1 for the depth-unaware (muP-style)
variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import RngStream


def _branch_scale(depth: int, alpha: float | None) -> float:
    return 1.0 if alpha is None else float(depth) ** -alpha


@dataclass
class ToyLinearResNet:
    """h^{l+1} = h^l + c * W2^l W1^l h^l; alpha=None means no depth scaling."""

    depth: int
    width: int
    alpha: float | None
    w1: list[np.ndarray]
    w2: list[np.ndarray]

    @classmethod
    def init(cls, depth: int, width: int, alpha: float | None, seed: int) -> "ToyLinearResNet":
        # One bulk draw per model (stream 0); layer l uses slabs [l, 0] / [l, 1].
        g = RngStream(seed, 0).generator()
        std = width**-0.5
        block = g.standard_normal((depth, 2, width, width)) * std
        w1 = [block[layer, 0] for layer in range(depth)]
        w2 = [block[layer, 1] for layer in range(depth)]
        return cls(depth, width, alpha, w1, w2)

    @property
    def branch_scale(self) -> float:
        return _branch_scale(self.depth, self.alpha)

    def block(self, layer: int, h: np.ndarray, w1=None, w2=None) -> np.ndarray:
        w1 = self.w1[layer] if w1 is None else w1
        w2 = self.w2[layer] if w2 is None else w2
        return h + self.branch_scale * (w2 @ (w1 @ h))

    def forward(self, h0: np.ndarray) -> list[np.ndarray]:
        """Returns [h^0, h^1, ..., h^L]."""
        hs = [h0]
        for layer in range(self.depth):
            hs.append(self.block(layer, hs[-1]))
        return hs

    def backward_to_layer(self, layer: int, g_out: np.ndarray) -> np.ndarray:
        """Pull a gradient at h^L back to h^{layer+1} (transposed block maps)."""
        c = self.branch_scale
        g = g_out
        for m in reversed(range(layer + 1, self.depth)):
            g = g + c * (self.w1[m].T @ (self.w2[m].T @ g))
        return g

    def block_param_grads(self, layer: int, h_in: np.ndarray, g_next: np.ndarray):
        """Gradients of a scalar loss w.r.t. (W1^layer, W2^layer).

        ``g_next`` is the loss gradient at h^{layer+1}; h_in is h^{layer}.
        """
        c = self.branch_scale
        w1h = self.w1[layer] @ h_in
        d_w2 = c * np.outer(g_next, w1h)
        d_w1 = c * np.outer(self.w2[layer].T @ g_next, h_in)
        return d_w1, d_w2


@dataclass
class ToyReluResMLP:
    """h^{l+1} = h^l + c * W^l relu(h^l), W^l_ij ~ N(0, sigma_w^2 / N)."""

    depth: int
    width: int
    alpha: float | None
    sigma_w: float
    w: list[np.ndarray]

    @classmethod
    def init(cls, depth: int, width: int, alpha: float | None, sigma_w: float, seed: int) -> "ToyReluResMLP":
        std = sigma_w / width**0.5
        block = RngStream(seed, 0).generator().standard_normal((depth, width, width)) * std
        w = [block[layer] for layer in range(depth)]
        return cls(depth, width, alpha, sigma_w, w)

    @property
    def branch_scale(self) -> float:
        return _branch_scale(self.depth, self.alpha)

    def forward(self, h0: np.ndarray) -> list[np.ndarray]:
        hs = [h0]
        for layer in range(self.depth):
            h = hs[-1]
            hs.append(h + self.branch_scale * (self.w[layer] @ np.maximum(h, 0.0)))
        return hs

    def norm_sequence(self, h0: np.ndarray) -> list[float]:
        """Empirical H^l = |h^l|^2 / N along the forward pass."""
        return [float(h @ h) / self.width for h in self.forward(h0)]

    def loss_grads(self, h0: np.ndarray):
        """Gradient of loss = mean(h^L) w.r.t. every W^l."""
        hs = self.forward(h0)
        c = self.branch_scale
        g = np.full(self.width, 1.0 / self.width)
        grads: list[np.ndarray] = [None] * self.depth  # type: ignore[list-item]
        for layer in reversed(range(self.depth)):
            phi = np.maximum(hs[layer], 0.0)
            grads[layer] = c * np.outer(g, phi)
            mask = (hs[layer] > 0).astype(float)
            g = g + c * mask * (self.w[layer].T @ g)
        return hs, grads
