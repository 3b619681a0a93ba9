"""Pre-LN decoder-only transformer with plan-scaled residual branches.

Forward and backward passes are written out explicitly over numpy so the
backward rules can be checked against finite differences.  The residual
stream is snapshotted after each MHA merge and each MLP merge; those two
capture points per layer are what the coordinate-check diagnostics consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import (
    NonFiniteError,
    RngStream,
    alibi_bias,
    cross_entropy,
    gaussian_init,
    layernorm_bwd,
    layernorm_fwd,
    relu2_bwd,
    relu2_fwd,
    softmax_rows,
    softmax_rows_bwd,
)
from .plan import ParamRole, ScalingPlan


@dataclass(frozen=True)
class ModelConfig:
    n: int
    l: int
    vocab_size: int
    seq_len: int
    d_head: int = 64
    # None draws LN gains from the plan's role init std (the default rule);
    # a float pins them to that constant instead (e.g. 1.0 for a vanilla GPT).
    ln_gain_init: float | None = None

    def __post_init__(self) -> None:
        if self.n % self.d_head != 0:
            raise ValueError(f"width {self.n} must be a multiple of d_head {self.d_head}")
        if min(self.n, self.l, self.vocab_size, self.seq_len, self.d_head) < 1:
            raise ValueError("all model dimensions must be positive")

    @property
    def n_heads(self) -> int:
        return self.n // self.d_head

    @property
    def ffn_width(self) -> int:
        return 4 * self.n


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    role: ParamRole
    layer: int | None  # None for embedding/unembedding/final LN


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Declaration-order tensor list; the list index is the RNG stream id."""
    n, f, v = cfg.n, cfg.ffn_width, cfg.vocab_size
    specs = [ParamSpec("embedding", (v, n), ParamRole.EMBEDDING, None)]
    for i in range(cfg.l):
        p = f"layers.{i}."
        specs += [
            ParamSpec(p + "ln1.gain", (n,), ParamRole.PRE_LN, i),
            ParamSpec(p + "ln1.bias", (n,), ParamRole.PRE_LN, i),
            ParamSpec(p + "attn.wq", (n, n), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "attn.bq", (n,), ParamRole.HIDDEN_BIAS, i),
            ParamSpec(p + "attn.wk", (n, n), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "attn.bk", (n,), ParamRole.HIDDEN_BIAS, i),
            ParamSpec(p + "attn.wv", (n, n), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "attn.bv", (n,), ParamRole.HIDDEN_BIAS, i),
            ParamSpec(p + "attn.wo", (n, n), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "attn.bo", (n,), ParamRole.HIDDEN_BIAS, i),
            ParamSpec(p + "ln2.gain", (n,), ParamRole.PRE_LN, i),
            ParamSpec(p + "ln2.bias", (n,), ParamRole.PRE_LN, i),
            ParamSpec(p + "mlp.w_up", (f, n), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "mlp.b_up", (f,), ParamRole.HIDDEN_BIAS, i),
            ParamSpec(p + "mlp.w_down", (n, f), ParamRole.HIDDEN_WEIGHT, i),
            ParamSpec(p + "mlp.b_down", (n,), ParamRole.HIDDEN_BIAS, i),
        ]
    specs += [
        ParamSpec("final_ln.gain", (n,), ParamRole.FINAL_LN, None),
        ParamSpec("final_ln.bias", (n,), ParamRole.FINAL_LN, None),
        ParamSpec("unembedding", (v, n), ParamRole.UNEMBEDDING, None),
    ]
    return specs


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    roles: dict[str, ParamRole]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}


def init_params(cfg: ModelConfig, plan: ScalingPlan, seed: int, dtype=np.float32) -> Parameters:
    """Initialize all tensors; a pure function of (seed, config, plan)."""
    tensors: dict[str, np.ndarray] = {}
    roles: dict[str, ParamRole] = {}
    for stream_id, spec in enumerate(param_specs(cfg)):
        roles[spec.name] = spec.role
        if spec.name.endswith(".gain") and cfg.ln_gain_init is not None:
            tensors[spec.name] = np.full(spec.shape, cfg.ln_gain_init, dtype=dtype)
            continue
        if spec.name.endswith(".bias") and spec.role in (ParamRole.PRE_LN, ParamRole.FINAL_LN):
            tensors[spec.name] = np.zeros(spec.shape, dtype=dtype)
            continue
        std = plan.entry(spec.role).init_std
        tensors[spec.name] = gaussian_init(RngStream(seed, stream_id), spec.shape, std, dtype)
    return Parameters(cfg, tensors, roles)


@dataclass
class ActivationTrace:
    """Residual-stream snapshots after the MHA and MLP merges of every layer."""

    step: int
    mha_rms: list[float] = field(default_factory=list)
    mha_fro: list[float] = field(default_factory=list)
    mlp_rms: list[float] = field(default_factory=list)
    mlp_fro: list[float] = field(default_factory=list)

    def merge_fro_norms(self) -> list[float]:
        """Interleaved [mha_0, mlp_0, mha_1, ...]; 2L entries."""
        out: list[float] = []
        for a, b in zip(self.mha_fro, self.mlp_fro):
            out += [a, b]
        return out

    @property
    def final_fro(self) -> float:
        return self.mlp_fro[-1]


@dataclass
class ForwardPass:
    logits: np.ndarray
    trace: ActivationTrace
    caches: dict  # consumed by backward()


def _norms(x: np.ndarray) -> tuple[float, float]:
    sq = float(np.sum(x.astype(np.float64) ** 2))
    return (sq / x.size) ** 0.5, sq**0.5


def forward(
    params: Parameters,
    plan: ScalingPlan,
    tokens: np.ndarray,
    *,
    step: int = 0,
    check_finite: bool = False,
) -> ForwardPass:
    """Run the model on integer tokens of shape (batch, seq)."""
    cfg = params.config
    t = params.tensors
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
    B, T = tokens.shape
    if T > cfg.seq_len:
        raise ValueError(f"sequence length {T} exceeds configured {cfg.seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"min={tokens.min()}, max={tokens.max()}"
        )

    dtype = t["embedding"].dtype
    n, d, H = cfg.n, cfg.d_head, cfg.n_heads
    rmult = dtype.type(plan.residual_multiplier)
    scale = dtype.type(plan.attn_logit_scale)
    bias_hij = alibi_bias(H, T, dtype)

    x = t["embedding"][tokens]
    trace = ActivationTrace(step=step)
    layer_caches = []

    for i in range(cfg.l):
        p = f"layers.{i}."
        a1, ln1_cache = layernorm_fwd(x, t[p + "ln1.gain"], t[p + "ln1.bias"])
        q = a1 @ t[p + "attn.wq"].T + t[p + "attn.bq"]
        k = a1 @ t[p + "attn.wk"].T + t[p + "attn.bk"]
        v = a1 @ t[p + "attn.wv"].T + t[p + "attn.bv"]
        qh = q.reshape(B, T, H, d).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, d).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, d).transpose(0, 2, 1, 3)
        s = qh @ kh.transpose(0, 1, 3, 2) * scale + bias_hij[None]
        pattn = softmax_rows(s)
        z = pattn @ vh
        zc = z.transpose(0, 2, 1, 3).reshape(B, T, n)
        o = zc @ t[p + "attn.wo"].T + t[p + "attn.bo"]
        x = x + rmult * o
        trace.mha_rms.append(_norms(x)[0])
        trace.mha_fro.append(_norms(x)[1])
        if check_finite and not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite residual after MHA merge, layer {i}, step {step}")

        a2, ln2_cache = layernorm_fwd(x, t[p + "ln2.gain"], t[p + "ln2.bias"])
        u = a2 @ t[p + "mlp.w_up"].T + t[p + "mlp.b_up"]
        fu = relu2_fwd(u)
        dn = fu @ t[p + "mlp.w_down"].T + t[p + "mlp.b_down"]
        x = x + rmult * dn
        trace.mlp_rms.append(_norms(x)[0])
        trace.mlp_fro.append(_norms(x)[1])
        if check_finite and not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite residual after MLP merge, layer {i}, step {step}")

        layer_caches.append(
            dict(ln1=ln1_cache, a1=a1, qh=qh, kh=kh, vh=vh, pattn=pattn, zc=zc,
                 ln2=ln2_cache, a2=a2, u=u, fu=fu)
        )

    xf, lnf_cache = layernorm_fwd(x, t["final_ln.gain"], t["final_ln.bias"])
    umult = dtype.type(plan.unemb_forward_multiplier)
    logits = xf @ t["unembedding"].T * umult

    caches = dict(tokens=tokens, layers=layer_caches, lnf=lnf_cache, xf=xf, B=B, T=T)
    return ForwardPass(logits=logits, trace=trace, caches=caches)


def backward(
    params: Parameters,
    plan: ScalingPlan,
    fwd: ForwardPass,
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact reverse of forward(); gradients keyed identically to the tensors."""
    cfg = params.config
    t = params.tensors
    c = fwd.caches
    B, T = c["B"], c["T"]
    n, d, H = cfg.n, cfg.d_head, cfg.n_heads
    dtype = t["embedding"].dtype
    rmult = dtype.type(plan.residual_multiplier)
    scale = dtype.type(plan.attn_logit_scale)

    grads: dict[str, np.ndarray] = {}

    dl = dlogits * plan.unemb_forward_multiplier
    grads["unembedding"] = dl.reshape(-1, cfg.vocab_size).T @ c["xf"].reshape(-1, n)
    dxf = dl @ t["unembedding"]
    dx, grads["final_ln.gain"], grads["final_ln.bias"] = layernorm_bwd(c["lnf"], dxf)

    for i in reversed(range(cfg.l)):
        p = f"layers.{i}."
        lc = c["layers"][i]

        # MLP branch
        ddn = rmult * dx
        grads[p + "mlp.b_down"] = ddn.reshape(-1, n).sum(axis=0)
        grads[p + "mlp.w_down"] = ddn.reshape(-1, n).T @ lc["fu"].reshape(-1, cfg.ffn_width)
        dfu = ddn @ t[p + "mlp.w_down"]
        du = relu2_bwd(lc["u"], dfu)
        grads[p + "mlp.b_up"] = du.reshape(-1, cfg.ffn_width).sum(axis=0)
        grads[p + "mlp.w_up"] = du.reshape(-1, cfg.ffn_width).T @ lc["a2"].reshape(-1, n)
        da2 = du @ t[p + "mlp.w_up"]
        dx2, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = layernorm_bwd(lc["ln2"], da2)
        dx = dx + dx2

        # MHA branch
        do = rmult * dx
        grads[p + "attn.bo"] = do.reshape(-1, n).sum(axis=0)
        grads[p + "attn.wo"] = do.reshape(-1, n).T @ lc["zc"].reshape(-1, n)
        dzc = do @ t[p + "attn.wo"]
        dz = dzc.reshape(B, T, H, d).transpose(0, 2, 1, 3)
        dp = dz @ lc["vh"].transpose(0, 1, 3, 2)
        dvh = lc["pattn"].transpose(0, 1, 3, 2) @ dz
        ds = softmax_rows_bwd(lc["pattn"], dp)
        dqh = ds @ lc["kh"] * scale
        dkh = ds.transpose(0, 1, 3, 2) @ lc["qh"] * scale
        dq = dqh.transpose(0, 2, 1, 3).reshape(B, T, n)
        dk = dkh.transpose(0, 2, 1, 3).reshape(B, T, n)
        dv = dvh.transpose(0, 2, 1, 3).reshape(B, T, n)
        a1f = lc["a1"].reshape(-1, n)
        grads[p + "attn.wq"] = dq.reshape(-1, n).T @ a1f
        grads[p + "attn.bq"] = dq.reshape(-1, n).sum(axis=0)
        grads[p + "attn.wk"] = dk.reshape(-1, n).T @ a1f
        grads[p + "attn.bk"] = dk.reshape(-1, n).sum(axis=0)
        grads[p + "attn.wv"] = dv.reshape(-1, n).T @ a1f
        grads[p + "attn.bv"] = dv.reshape(-1, n).sum(axis=0)
        da1 = dq @ t[p + "attn.wq"] + dk @ t[p + "attn.wk"] + dv @ t[p + "attn.wv"]
        dx1, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = layernorm_bwd(lc["ln1"], da1)
        dx = dx + dx1

    demb = np.zeros_like(t["embedding"])
    np.add.at(demb, c["tokens"], dx)
    grads["embedding"] = demb

    for name in grads:
        grads[name] = grads[name].astype(t[name].dtype, copy=False)
    return grads


def loss_and_grads(params: Parameters, plan: ScalingPlan, tokens, targets, **fwd_kwargs):
    """Convenience: forward + mean cross entropy + backward."""
    out = forward(params, plan, tokens, **fwd_kwargs)
    loss, dlogits = cross_entropy(out.logits, np.asarray(targets))
    grads = backward(params, plan, out, dlogits)
    return loss, grads, out
