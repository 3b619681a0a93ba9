"""HTTP service exposing the pure analytic operations: plan resolution and
diffing, the signal-propagation oracle, power-law fitting, shape grids, and
the run-recipe arithmetic.

Long-running work (training, coordinate checks, laziness sweeps) stays in
the CLI; the service only wraps fast deterministic functions.
"""

from __future__ import annotations

import math

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import scaling
from .diagnostics import sigprop
from .plan import (
    BaseHyperparams,
    ParamKind,
    PlanError,
    diff_plans,
    plan_from_dict,
    plan_to_dict,
    resolve_plan,
)

app = FastAPI(title="completep", version="1.0.0")


class PlanRequest(BaseModel):
    kind: str
    alpha: float | None = None
    n: int = Field(ge=1)
    l: int = Field(ge=1)
    sigma_base: float = 0.02
    eta_base: float = 0.0039
    lambda_base: float = 0.0
    epsilon_base: float = 1e-16
    n_base: int = 256
    l_base: int = 2
    d_head: int = 64
    attn_scale_mode: str = "d_head"
    ln_bias_depth_correction: bool = True

    def resolve(self):
        base = BaseHyperparams(
            sigma_base=self.sigma_base,
            eta_base=self.eta_base,
            lambda_base=self.lambda_base,
            epsilon_base=self.epsilon_base,
            n_base=self.n_base,
            l_base=self.l_base,
        )
        return resolve_plan(
            ParamKind(self.kind, self.alpha),
            base,
            self.n,
            self.l,
            d_head=self.d_head,
            attn_scale_mode=self.attn_scale_mode,
            ln_bias_depth_correction=self.ln_bias_depth_correction,
        )


class PlanDiffRequest(BaseModel):
    a: dict
    b: dict


class SigpropRequest(BaseModel):
    alpha: float = Field(ge=0)
    sigma_w2: float = Field(ge=0)
    depth: int = Field(ge=1)
    h0: float = 1.0


class FitRequest(BaseModel):
    points: list[tuple[float, float]]  # (flops, loss)


class GridRequest(BaseModel):
    p_target: float = Field(gt=0)
    d_head: int = 64
    count: int | None = None
    vocab: int = 50257
    seq_len: int = 2048
    tpp: float = 20.0


class BatchSizeRequest(BaseModel):
    flops: float = Field(gt=0)


class ParamsRequest(BaseModel):
    n: int = Field(ge=1)
    l: int = Field(ge=0)
    vocab: int = Field(ge=1)
    tpp: float = 20.0


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/plan")
def plan_endpoint(req: PlanRequest) -> dict:
    try:
        return plan_to_dict(req.resolve())
    except PlanError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


@app.post("/plan/diff")
def plan_diff_endpoint(req: PlanDiffRequest) -> dict:
    try:
        diffs = diff_plans(plan_from_dict(req.a), plan_from_dict(req.b))
    except PlanError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return {"differences": [{"field": f, "a": va, "b": vb} for f, va, vb in diffs]}


@app.post("/sigprop")
def sigprop_endpoint(req: SigpropRequest) -> dict:
    try:
        res = sigprop(req.alpha, req.sigma_w2, req.depth, req.h0)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return {
        "h_final": res.h_final,
        "ratio": res.ratio,
        "limit_case": res.limit_case,
        "limit_value": None if math.isinf(res.limit_value) else res.limit_value,
    }


@app.post("/fit")
def fit_endpoint(req: FitRequest) -> dict:
    try:
        fit = scaling.fit_power_law(list(req.points))
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return {"a": fit.a, "b": fit.b, "log_rss": fit.log_rss, "n_points": fit.n_points}


@app.post("/grid")
def grid_endpoint(req: GridRequest) -> dict:
    try:
        points = scaling.nl_grid(
            req.p_target,
            d_head=req.d_head,
            count=req.count,
            vocab=req.vocab,
            seq_len=req.seq_len,
            tpp=req.tpp,
        )
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return {
        "points": [
            {
                "n": p.n,
                "l": p.l,
                "n_over_l": p.n_over_l,
                "p_nonemb": p.p_nonemb,
                "p_total": p.p_total,
                "tokens": p.tokens,
                "train_flops": p.train_flops,
                "steps": p.steps,
                "batch_size": p.batch_size,
            }
            for p in points
        ]
    }


@app.post("/batch-size")
def batch_size_endpoint(req: BatchSizeRequest) -> dict:
    return {"batch_size": scaling.batch_size_from_flops(req.flops)}


@app.post("/params")
def params_endpoint(req: ParamsRequest) -> dict:
    p_ne = scaling.nonemb_params(req.n, req.l)
    p_tot = scaling.total_params(req.n, req.l, req.vocab)
    return {
        "p_nonemb": p_ne,
        "p_total": p_tot,
        "tokens": scaling.tokens_for_tpp(p_tot, req.tpp),
    }
