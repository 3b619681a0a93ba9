"""Transformer forward/backward: gradient oracle, causality, init behavior."""

import numpy as np
import pytest

from completep.kernel import RngStream
from completep.model import (
    ModelConfig,
    backward,
    forward,
    init_params,
    loss_and_grads,
    param_specs,
)
from completep.plan import BaseHyperparams, ParamKind, ParamRole, resolve_plan

BASE = BaseHyperparams(n_base=32, l_base=2)


def tiny_setup(kind=None, n=32, l=2, vocab=17, seq=8, d_head=16, seed=0, ln_gain=None,
               sigma=None):
    kind = kind or ParamKind.completep()
    base = BASE if sigma is None else BaseHyperparams(sigma_base=sigma, n_base=32, l_base=2)
    plan = resolve_plan(kind, base, n, l, d_head=d_head)
    cfg = ModelConfig(n, l, vocab, seq, d_head=d_head, ln_gain_init=ln_gain)
    params = init_params(cfg, plan, seed, dtype=np.float64)
    return cfg, plan, params


def test_param_specs_shapes_and_roles():
    cfg = ModelConfig(32, 2, 17, 8, d_head=16)
    specs = param_specs(cfg)
    names = [s.name for s in specs]
    assert names[0] == "embedding" and names[-1] == "unembedding"
    # embedding + 16 tensors per layer + final LN gain/bias + unembedding
    assert len(specs) == 4 + 16 * cfg.l
    by_name = {s.name: s for s in specs}
    assert by_name["embedding"].shape == (17, 32)
    assert by_name["layers.0.mlp.w_up"].shape == (128, 32)
    assert by_name["layers.1.attn.wq"].role is ParamRole.HIDDEN_WEIGHT
    assert by_name["layers.1.ln2.gain"].role is ParamRole.PRE_LN
    assert by_name["final_ln.gain"].role is ParamRole.FINAL_LN


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(30, 2, 17, 8, d_head=16)  # width not multiple of d_head
    with pytest.raises(ValueError):
        ModelConfig(32, 0, 17, 8, d_head=16)


def test_init_untied_embeddings_and_ln_defaults():
    cfg, plan, params = tiny_setup()
    assert not np.shares_memory(params["embedding"], params["unembedding"])
    assert not np.array_equal(params["embedding"], params["unembedding"])
    # LN biases start at zero; gains are random draws at the role's std.
    np.testing.assert_array_equal(params["layers.0.ln1.bias"], 0.0)
    gains = params["layers.0.ln1.gain"]
    assert gains.std() > 0
    # Pinning a constant overrides the draw.
    _, _, pinned = tiny_setup(ln_gain=1.0)
    np.testing.assert_array_equal(pinned["layers.0.ln1.gain"], 1.0)
    np.testing.assert_array_equal(pinned["final_ln.gain"], 1.0)


def test_init_is_deterministic():
    _, _, a = tiny_setup(seed=5)
    _, _, b = tiny_setup(seed=5)
    _, _, c = tiny_setup(seed=6)
    for name in a.tensors:
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a["embedding"], c["embedding"])


def test_forward_validates_tokens():
    cfg, plan, params = tiny_setup()
    with pytest.raises(ValueError):
        forward(params, plan, np.zeros(8, dtype=int))
    with pytest.raises(ValueError):
        forward(params, plan, np.full((1, 9), 0))  # longer than seq_len
    with pytest.raises(ValueError):
        forward(params, plan, np.full((1, 8), 17))  # out-of-range token


def test_forward_causality():
    """Changing a future token must not change earlier logits."""
    cfg, plan, params = tiny_setup()
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 17, size=(2, 8))
    out_a = forward(params, plan, tokens)
    tokens_b = tokens.copy()
    tokens_b[:, -1] = (tokens_b[:, -1] + 1) % 17
    out_b = forward(params, plan, tokens_b)
    np.testing.assert_array_equal(out_a.logits[:, :-1], out_b.logits[:, :-1])
    assert not np.array_equal(out_a.logits[:, -1], out_b.logits[:, -1])


def test_zero_params_give_uniform_loss():
    cfg, plan, params = tiny_setup()
    for name in params.tensors:
        params.tensors[name][...] = 0.0
    tokens = np.zeros((2, 8), dtype=int)
    loss, grads, _ = loss_and_grads(params, plan, tokens, tokens)
    assert loss == pytest.approx(np.log(17.0), rel=1e-12)


def test_trace_shapes():
    cfg, plan, params = tiny_setup(l=3)
    tokens = np.random.default_rng(1).integers(0, 17, size=(2, 8))
    out = forward(params, plan, tokens, step=4)
    assert out.trace.step == 4
    assert len(out.trace.mha_fro) == 3 and len(out.trace.mlp_fro) == 3
    merges = out.trace.merge_fro_norms()
    assert len(merges) == 6
    assert merges[0] == out.trace.mha_fro[0] and merges[1] == out.trace.mlp_fro[0]
    assert out.trace.final_fro == out.trace.mlp_fro[-1]


SAMPLED_TENSORS = [
    "embedding",
    "layers.0.ln1.gain",
    "layers.0.attn.wq",
    "layers.0.attn.bv",
    "layers.0.attn.wo",
    "layers.1.mlp.w_up",
    "layers.1.mlp.b_down",
    "layers.1.ln2.bias",
    "final_ln.gain",
    "unembedding",
]


@pytest.mark.parametrize("kind", [ParamKind.sp(), ParamKind.completep()])
def test_gradient_oracle_sampled_fd(kind):
    """Analytic gradients vs central finite differences on sampled entries.

    A large init std keeps every sampled tensor's gradient well above the
    FD noise floor, so the relative comparison is meaningful throughout.
    """
    cfg, plan, params = tiny_setup(kind=kind, sigma=0.5)
    rng = np.random.default_rng(3)
    tokens = rng.integers(0, 17, size=(2, 8))
    targets = rng.integers(0, 17, size=(2, 8))
    loss, grads, _ = loss_and_grads(params, plan, tokens, targets)

    # Directional derivative per tensor: robust against individually tiny
    # gradient entries that a per-entry comparison would drown in FD noise.
    eps = 1e-6
    worst = 0.0
    for name in SAMPLED_TENSORS:
        w = params.tensors[name]
        v = rng.standard_normal(w.shape)
        v /= np.linalg.norm(v)
        w += eps * v
        lp = loss_and_grads(params, plan, tokens, targets)[0]
        w -= 2 * eps * v
        lm = loss_and_grads(params, plan, tokens, targets)[0]
        w += eps * v
        fd = (lp - lm) / (2 * eps)
        an = float(np.sum(grads[name] * v))
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-10))
    assert worst <= 1e-4


def test_backward_matches_dtype():
    cfg, plan, params = tiny_setup()
    tokens = np.zeros((1, 4), dtype=int)
    out = forward(params, plan, tokens)
    grads = backward(params, plan, out, np.ones_like(out.logits))
    assert set(grads) == set(params.tensors)
    for name, g in grads.items():
        assert g.shape == params.tensors[name].shape
        assert g.dtype == params.tensors[name].dtype


def test_residual_multiplier_scales_branches():
    """With residual multiplier 0 the stream equals the embedding rows."""
    cfg, plan, params = tiny_setup()
    plan0 = resolve_plan(ParamKind.completep(), BASE, 32, 2, d_head=16)
    object.__setattr__(plan0, "residual_multiplier", 0.0)
    tokens = np.random.default_rng(2).integers(0, 17, size=(1, 8))
    out = forward(params, plan0, tokens)
    emb = params["embedding"][tokens]
    expect = float(np.linalg.norm(emb))
    assert out.trace.mha_fro[0] == pytest.approx(expect, rel=1e-12)
    assert out.trace.mlp_fro[-1] == pytest.approx(expect, rel=1e-12)


def test_init_stability_across_depth():
    """At init with constant LN gains, the depth-aware residual stream stays
    O(1) while the uncorrected standard rule grows with depth."""
    sigma = 0.006
    base = BaseHyperparams(sigma_base=sigma, n_base=128, l_base=2)
    tokens = np.random.default_rng(0).integers(0, 64, size=(2, 16))

    def final_rms(kind, l):
        plan = resolve_plan(kind, base, 128, l, d_head=32)
        cfg = ModelConfig(128, l, 64, 16, d_head=32, ln_gain_init=1.0)
        params = init_params(cfg, plan, 0, dtype=np.float64)
        return forward(params, plan, tokens).trace.mlp_rms[-1]

    for alpha in (0.5, 1.0):
        kind = ParamKind.depth_alpha(alpha)
        ratio = final_rms(kind, 64) / final_rms(kind, 2)
        assert ratio < 3.0
    sp_ratio = final_rms(ParamKind.sp(), 64) / final_rms(ParamKind.sp(), 2)
    assert sp_ratio > 3.0
