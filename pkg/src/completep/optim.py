"""AdamW with per-role hyperparameters, the linear warmup/decay schedule,
and the weight-decay timescale rule used to derive lambda_base."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernel import NonFiniteError
from .plan import ParamRole, ScalingPlan

BETA1 = 0.9
BETA2 = 0.95

WARMUP_TOKEN_CAP = 375_000_000  # warmup never exceeds this many tokens


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to peak, then linear decay to zero.

    ``fraction(step)`` returns the multiplier in [0, 1] applied to each
    group's peak learning rate; step is 1-based and fraction(total_steps)=0.
    """

    total_steps: int
    warmup_steps: int

    @classmethod
    def for_run(
        cls,
        total_steps: int,
        batch_size: int,
        seq_len: int,
        *,
        warmup_frac: float = 0.10,
        warmup_token_cap: int = WARMUP_TOKEN_CAP,
    ) -> "Schedule":
        cap_steps = max(1, math.ceil(warmup_token_cap / (batch_size * seq_len)))
        warmup = min(math.ceil(warmup_frac * total_steps), cap_steps)
        return cls(total_steps=total_steps, warmup_steps=max(1, warmup))

    def fraction(self, step: int) -> float:
        if not 1 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [1, {self.total_steps}]")
        if step <= self.warmup_steps:
            return step / self.warmup_steps
        if self.total_steps == self.warmup_steps:
            return 1.0
        return (self.total_steps - step) / (self.total_steps - self.warmup_steps)


def lambda_from_tau(tau_ema: float, eta_base: float, n_steps: int) -> float:
    """lambda_base such that the weight-decay timescale equals tau_ema."""
    if tau_ema <= 0 or eta_base <= 0 or n_steps <= 0:
        raise ValueError("tau_ema, eta_base and n_steps must all be > 0")
    return 1.0 / (tau_ema * eta_base * n_steps)


def tau_ema(eta_base: float, lambda_base: float, n_steps: int) -> float:
    if eta_base <= 0 or lambda_base <= 0 or n_steps <= 0:
        raise ValueError("eta_base, lambda_base and n_steps must all be > 0")
    return 1.0 / (eta_base * lambda_base * n_steps)


@dataclass(frozen=True)
class GroupHyperparams:
    lr: float
    wd: float
    eps: float
    beta1: float = BETA1
    beta2: float = BETA2


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam; group hyperparameters come from the plan."""

    groups: dict[str, GroupHyperparams]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def from_plan(
        cls,
        plan: ScalingPlan,
        roles: dict[str, ParamRole],
        *,
        beta1: float = BETA1,
        beta2: float = BETA2,
    ) -> "AdamW":
        groups = {}
        for name, role in roles.items():
            e = plan.entry(role)
            groups[name] = GroupHyperparams(e.lr, e.wd, e.eps, beta1, beta2)
        return cls(groups=groups)

    def step(
        self,
        tensors: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        *,
        lr_scale: float = 1.0,
    ) -> None:
        """One in-place update; ``lr_scale`` is the schedule fraction."""
        self.t += 1
        for name, w in tensors.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {name!r} at step {self.t}")
            hp = self.groups[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(w, dtype=np.float64)
                self.v[name] = np.zeros_like(w, dtype=np.float64)
            m, v = self.m[name], self.v[name]
            g64 = g.astype(np.float64, copy=False)
            m *= hp.beta1
            m += (1 - hp.beta1) * g64
            v *= hp.beta2
            v += (1 - hp.beta2) * g64 * g64
            mhat = m / (1 - hp.beta1**self.t)
            vhat = v / (1 - hp.beta2**self.t)
            lr = hp.lr * lr_scale
            update = lr * (mhat / (np.sqrt(vhat) + hp.eps)) + lr * hp.wd * w
            w -= update.astype(w.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adamw.m.{name}"] = self.m[name]
            out[f"adamw.v.{name}"] = self.v[name]
        return out
