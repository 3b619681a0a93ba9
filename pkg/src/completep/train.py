"""Desk-scale training loop: resolved-config echo, deterministic metrics
stream, learning-rate sweeps, and checkpointing.

Determinism contract: ``metrics.jsonl`` is a pure function of the resolved
config (wall-clock timings go to a separate ``timings.jsonl`` so metrics
files from identical runs are bit-identical).
"""

from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .checkpoint import save_checkpoint
from .data import make_source
from .kernel import NonFiniteError
from .model import ModelConfig, Parameters, init_params, loss_and_grads
from .optim import AdamW, Schedule, lambda_from_tau
from .plan import BaseHyperparams, ParamKind, ParamRole, ScalingPlan, plan_to_dict, resolve_plan
from .scaling import batch_size_from_flops, flops_detailed, tokens_for_tpp, total_params


class RunConfig(BaseModel):
    """Fully describes one training run; the resolved echo reproduces it exactly."""

    # parameterization
    kind: str = "depth_alpha"  # "sp" | "mup" | "depth_alpha"
    alpha: float | None = 1.0
    sigma_base: float = 0.02
    eta_base: float = 0.0039
    lambda_base: float | None = None  # None -> derived from tau_ema
    epsilon_base: float = 1e-16
    n_base: int = 256
    l_base: int = 2
    attn_scale_mode: str = "d_head"
    ln_bias_depth_correction: bool = True
    # model shape
    n: int = 128
    l: int = 2
    vocab_size: int = 256
    seq_len: int = 64
    d_head: int = 64
    # recipe
    tpp: float = 20.0
    tau_ema: float | None = 0.1407
    batch_size: int | None = None  # None -> batch-size power law
    steps: int | None = None  # None -> ceil(tokens / (batch * seq))
    warmup_token_cap: int = 375_000_000
    # run
    seed: int = 0
    data: str = "synthetic"
    out_dir: str | None = None
    dtype: str = "float32"
    checkpoint: bool = True

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.kind not in ("sp", "mup", "depth_alpha"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind != "depth_alpha" and self.alpha is not None:
            raise ValueError(f"kind {self.kind!r} does not take alpha")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    def param_kind(self) -> ParamKind:
        return ParamKind(self.kind, self.alpha)


@dataclass(frozen=True)
class ResolvedRun:
    config: RunConfig
    plan: ScalingPlan
    model_config: ModelConfig
    schedule: Schedule
    batch_size: int
    n_steps: int
    tokens: int
    lambda_base: float

    def to_dict(self) -> dict:
        return {
            "config": self.config.model_dump(),
            "plan": plan_to_dict(self.plan),
            "batch_size": self.batch_size,
            "n_steps": self.n_steps,
            "tokens": self.tokens,
            "warmup_steps": self.schedule.warmup_steps,
            "lambda_base": self.lambda_base,
        }


def resolve_run(cfg: RunConfig) -> ResolvedRun:
    """Expand every default: token budget, batch size, steps, schedule, plan."""
    p_total = total_params(cfg.n, cfg.l, cfg.vocab_size)
    tokens = tokens_for_tpp(p_total, cfg.tpp)
    if cfg.batch_size is not None:
        batch = cfg.batch_size
    else:
        flops = flops_detailed(cfg.n, cfg.l, cfg.vocab_size, cfg.seq_len, tokens, cfg.d_head)
        batch = batch_size_from_flops(flops)
    if cfg.steps is not None:
        n_steps = cfg.steps
        tokens = n_steps * batch * cfg.seq_len
    else:
        n_steps = math.ceil(tokens / (batch * cfg.seq_len))
    if cfg.lambda_base is not None:
        lam = cfg.lambda_base
    elif cfg.tau_ema is not None:
        lam = lambda_from_tau(cfg.tau_ema, cfg.eta_base, n_steps)
    else:
        lam = 0.0
    base = BaseHyperparams(
        sigma_base=cfg.sigma_base,
        eta_base=cfg.eta_base,
        lambda_base=lam,
        epsilon_base=cfg.epsilon_base,
        n_base=cfg.n_base,
        l_base=cfg.l_base,
    )
    plan = resolve_plan(
        cfg.param_kind(),
        base,
        cfg.n,
        cfg.l,
        d_head=cfg.d_head,
        attn_scale_mode=cfg.attn_scale_mode,
        ln_bias_depth_correction=cfg.ln_bias_depth_correction,
    )
    mcfg = ModelConfig(cfg.n, cfg.l, cfg.vocab_size, cfg.seq_len, d_head=cfg.d_head)
    schedule = Schedule.for_run(
        n_steps, batch, cfg.seq_len, warmup_token_cap=cfg.warmup_token_cap
    )
    return ResolvedRun(cfg, plan, mcfg, schedule, batch, n_steps, tokens, lam)


@dataclass
class TrainResult:
    final_loss: float
    n_steps: int
    diverged_at: int | None
    out_dir: str | None


def _role_lrs(plan: ScalingPlan, frac: float) -> dict[str, float]:
    return {role.value: plan.entry(role).lr * frac for role in ParamRole}


def train_run(cfg: RunConfig) -> TrainResult:
    """Train per the resolved recipe, streaming one metrics record per step."""
    run = resolve_run(cfg)
    out_dir = cfg.out_dir
    metrics_f = timings_f = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump(run.to_dict(), f, indent=2)
            f.write("\n")
        metrics_f = open(os.path.join(out_dir, "metrics.jsonl"), "w")
        timings_f = open(os.path.join(out_dir, "timings.jsonl"), "w")

    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    params = init_params(run.model_config, run.plan, cfg.seed, dtype=dtype)
    opt = AdamW.from_plan(run.plan, params.roles)
    source = make_source(cfg.data, cfg.vocab_size, cfg.seed)

    loss = math.nan
    diverged_at = None
    try:
        for step in range(1, run.n_steps + 1):
            t0 = time.monotonic()
            tokens_batch, targets = source.batch(step, run.batch_size, cfg.seq_len)
            frac = run.schedule.fraction(step)
            try:
                loss, grads, _ = loss_and_grads(
                    params, run.plan, tokens_batch, targets, step=step, check_finite=True
                )
                if not math.isfinite(loss):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                opt.step(params.tensors, grads, lr_scale=frac)
            except NonFiniteError as exc:
                diverged_at = step
                if metrics_f:
                    record = {"step": step, "event": str(exc)}
                    metrics_f.write(json.dumps(record) + "\n")
                raise
            if metrics_f:
                record = {
                    "step": step,
                    "tokens_seen": step * run.batch_size * cfg.seq_len,
                    "loss": loss,
                    "lr": _role_lrs(run.plan, frac),
                }
                metrics_f.write(json.dumps(record) + "\n")
                timings_f.write(
                    json.dumps({"step": step, "wall_ms": (time.monotonic() - t0) * 1e3}) + "\n"
                )
    finally:
        if metrics_f:
            metrics_f.close()
            timings_f.close()

    if out_dir is not None and cfg.checkpoint and diverged_at is None:
        tensors = dict(params.tensors)
        tensors.update(opt.state_tensors())
        meta = {
            "format": "completep-checkpoint",
            "run": run.to_dict(),
            "step": run.n_steps,
            "seed": cfg.seed,
        }
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), meta, tensors)
    return TrainResult(loss, run.n_steps, diverged_at, out_dir)


def restore_params(meta: dict, tensors: dict[str, np.ndarray]) -> tuple[Parameters, ScalingPlan]:
    """Rebuild Parameters and the plan from a loaded checkpoint."""
    from .plan import plan_from_dict

    cfg = RunConfig(**meta["run"]["config"])
    plan = plan_from_dict(meta["run"]["plan"])
    mcfg = ModelConfig(cfg.n, cfg.l, cfg.vocab_size, cfg.seq_len, d_head=cfg.d_head)
    from .model import param_specs

    roles = {spec.name: spec.role for spec in param_specs(mcfg)}
    model_tensors = {name: tensors[name] for name in roles}
    return Parameters(mcfg, model_tensors, roles), plan


def _sweep_one(args: tuple[RunConfig, float, str | None]) -> tuple[float, float, int | None]:
    cfg, eta, out_dir = args
    sub = cfg.model_copy(update={"eta_base": eta, "out_dir": out_dir})
    try:
        result = train_run(sub)
    except NonFiniteError:
        return eta, math.nan, -1
    return eta, result.final_loss, result.diverged_at


def lr_sweep(
    cfg: RunConfig,
    etas: list[float],
    *,
    jobs: int = 1,
) -> list[tuple[float, float]]:
    """Train one run per eta_base; returns [(eta, final_loss)] in eta order.

    Divergent runs report loss = nan.  Each job writes only under its own
    subdirectory of the parent's out_dir.
    """
    tasks = []
    for i, eta in enumerate(etas):
        sub_dir = None if cfg.out_dir is None else os.path.join(cfg.out_dir, f"eta_{i:02d}")
        tasks.append((cfg, eta, sub_dir))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, tasks))
    else:
        results = [_sweep_one(t) for t in tasks]
    table = [(eta, loss) for eta, loss, _ in results]
    if cfg.out_dir is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "lr_sweep.csv"), "w") as f:
            f.write("eta_base,final_loss\n")
            for eta, loss in table:
                f.write(f"{eta!r},{loss!r}\n")
    return table


def eta_grid(spec: str) -> list[float]:
    """Parse "2e-12..2e-4" into powers of two from the first to the last bound."""
    try:
        lo_s, hi_s = spec.split("..")
        lo, hi = float(lo_s), float(hi_s)
    except ValueError as exc:
        raise ValueError(f"bad eta grid {spec!r}; expected LOW..HIGH") from exc
    if not 0 < lo <= hi:
        raise ValueError(f"bad eta grid {spec!r}; need 0 < low <= high")
    etas = []
    e = lo
    while e <= hi * (1 + 1e-9):
        etas.append(e)
        e *= 2.0
    return etas
