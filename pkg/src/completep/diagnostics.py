"""Depth-scaling diagnostics: the analytic signal-propagation oracle, the
laziness/linearization-distance experiment on the linear toy model, and
coordinate checks on the real transformer.

All diagnostics run in float64.  Each (depth, seed) grid point draws from
its own RNG stream, so points are independent jobs and reports are
reproducible regardless of execution order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from io import StringIO

import numpy as np

from .data import MarkovByteSource
from .kernel import NonFiniteError, RngStream, cross_entropy
from .model import ModelConfig, backward, forward, init_params
from .optim import AdamW
from .plan import BaseHyperparams, ParamKind, resolve_plan
from .toy import ToyLinearResNet

# A forward pass whose output norm exceeds this multiple of its input norm
# is recorded as a divergence event (it need not overflow float64 to be
# useless as a signal).
DIVERGENCE_NORM_RATIO = 1e8


# ---------------------------------------------------------------------------
# Signal propagation
# ---------------------------------------------------------------------------

LIMIT_IDENTITY = "identity"
LIMIT_EXP = "exp(sigma^2/2)"
LIMIT_DIVERGENT = "divergent"


@dataclass(frozen=True)
class SigpropResult:
    """Norm recursion H^{l+1} = (1 + (sigma_w2/2) L^{-2 alpha}) H^l."""

    alpha: float
    sigma_w2: float
    depth: int
    h_seq: np.ndarray  # H^0 .. H^L
    limit_value: float  # math.inf for the divergent case
    limit_case: str

    @property
    def h_final(self) -> float:
        return float(self.h_seq[-1])

    @property
    def ratio(self) -> float:
        return self.h_final / float(self.h_seq[0])


def sigprop_limit(alpha: float, sigma_w2: float, h0: float = 1.0) -> tuple[float, str]:
    """Depth limit of the norm recursion, labeled by case."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if sigma_w2 < 0:
        raise ValueError(f"sigma_w2 must be >= 0, got {sigma_w2}")
    if h0 <= 0:
        raise ValueError(f"h0 must be > 0, got {h0}")
    if sigma_w2 == 0 or alpha > 0.5:
        return h0, LIMIT_IDENTITY
    if alpha == 0.5:
        return math.exp(sigma_w2 / 2.0) * h0, LIMIT_EXP
    return math.inf, LIMIT_DIVERGENT


def sigprop(alpha: float, sigma_w2: float, depth: int, h0: float = 1.0) -> SigpropResult:
    """Iterate the recursion for ``depth`` steps and attach the analytic limit."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    limit_value, limit_case = sigprop_limit(alpha, sigma_w2, h0)  # validates inputs
    growth = 1.0 + (sigma_w2 / 2.0) * float(depth) ** (-2.0 * alpha)
    h_seq = np.empty(depth + 1, dtype=np.float64)
    h_seq[0] = h0
    h_seq[1:] = h0 * np.cumprod(np.full(depth, growth))
    return SigpropResult(alpha, sigma_w2, depth, h_seq, limit_value, limit_case)


# ---------------------------------------------------------------------------
# Log-log slope fitting
# ---------------------------------------------------------------------------


def fit_loglog_slope(points: list[tuple[float, float]]) -> tuple[float, float, float]:
    """OLS of ln(value) on ln(L); returns (slope, intercept, r_squared)."""
    if len(points) < 3:
        raise ValueError(f"need at least 3 points, got {len(points)}")
    ls = np.array([p[0] for p in points], dtype=np.float64)
    vs = np.array([p[1] for p in points], dtype=np.float64)
    if np.any(ls <= 0) or np.any(vs <= 0):
        raise ValueError("all points must be positive for a log-log fit")
    x, y = np.log(ls), np.log(vs)
    slope, intercept = np.polyfit(x, y, 1)
    yhat = slope * x + intercept
    ss_res = float(np.sum((y - yhat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


# ---------------------------------------------------------------------------
# Laziness (linearization distance) on the linear toy model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LazinessPoint:
    depth: int
    seed: int
    metric: float  # nan when an event occurred
    event: str | None = None


@dataclass
class LazinessReport:
    alpha: float | None  # None = depth-unaware variant
    update_mode: str  # "both" | "w2"
    update_rule: str  # "sign" | "gd"
    eta0: float
    width: int
    layer_index: int
    points: list[LazinessPoint] = field(default_factory=list)

    @property
    def events(self) -> list[LazinessPoint]:
        return [p for p in self.points if p.event is not None]

    def quartiles(self) -> dict[int, tuple[float, float, float]]:
        """Per-depth (q1, median, q3) over seeds with a finite metric."""
        by_depth: dict[int, list[float]] = {}
        for p in self.points:
            if p.event is None and math.isfinite(p.metric):
                by_depth.setdefault(p.depth, []).append(p.metric)
        return {
            d: tuple(np.percentile(v, [25, 50, 75]))  # type: ignore[misc]
            for d, v in sorted(by_depth.items())
        }

    def fitted_slope(self) -> tuple[float, float, float]:
        """Log-log slope of the per-depth median metric."""
        medians = [(d, q[1]) for d, q in self.quartiles().items()]
        return fit_loglog_slope(medians)

    def to_csv(self) -> str:
        out = StringIO()
        w = csv.writer(out)
        w.writerow(["depth", "seed", "metric", "event"])
        for p in self.points:
            w.writerow([p.depth, p.seed, repr(p.metric), p.event or ""])
        return out.getvalue()

    def to_summary(self) -> dict:
        qs = self.quartiles()
        summary: dict = {
            "alpha": self.alpha,
            "update_mode": self.update_mode,
            "update_rule": self.update_rule,
            "eta0": self.eta0,
            "width": self.width,
            "layer_index": self.layer_index,
            "n_points": len(self.points),
            "n_events": len(self.events),
            "per_depth": {
                str(d): {"q1": q[0], "median": q[1], "q3": q[2]} for d, q in qs.items()
            },
        }
        try:
            slope, intercept, r2 = self.fitted_slope()
            summary["slope"] = slope
            summary["intercept"] = intercept
            summary["r_squared"] = r2
        except ValueError:
            summary["slope"] = None
        return summary

    def to_json(self) -> str:
        return json.dumps(self.to_summary(), indent=2) + "\n"


def _sign_like(g: np.ndarray) -> np.ndarray:
    return np.sign(g)


def laziness_block_metric(
    model: ToyLinearResNet,
    layer: int,
    h_in: np.ndarray,
    d_w1: np.ndarray,
    d_w2: np.ndarray,
) -> float:
    """Relative distance between the true block update and its linearization.

    The block output is h + c*(W2+dW2)(W1+dW1)h; subtracting the base output
    and the linear term c*(dW2 W1 + W2 dW1)h leaves exactly c*dW2 dW1 h, so
    the metric is ||dW2 dW1 h|| / ||(dW2 W1 + W2 dW1) h||.
    """
    w1, w2 = model.w1[layer], model.w2[layer]
    lin = d_w2 @ (w1 @ h_in) + w2 @ (d_w1 @ h_in)
    quad = d_w2 @ (d_w1 @ h_in)
    denom = float(np.linalg.norm(lin))
    if denom == 0.0:
        raise ZeroDivisionError("linearized update is exactly zero")
    return float(np.linalg.norm(quad)) / denom


def laziness_experiment(
    alpha: float | None,
    depths: list[int],
    n_seeds: int = 50,
    eta0: float = 1e-4,
    width: int = 256,
    layer_index: int = 0,
    *,
    update_mode: str = "both",
    update_rule: str = "sign",
    base_seed: int = 0,
    inputs: np.ndarray | None = None,
) -> LazinessReport:
    """One-update linearization distance at ``layer_index`` across depths.

    ``alpha=None`` runs the depth-unaware variant: branch scale 1 and a
    depth-independent step size eta0.  Depth-aware runs use branch scale
    L^-alpha and step size eta0 * L^(alpha-1).

    ``update_rule="sign"`` applies -eta * sign(grad) (the epsilon->0 first
    step of AdamW, whose per-entry magnitude is eta); "gd" applies the raw
    gradient step -eta * grad.  ``update_mode`` selects whether both block
    factors move or only the second ("w2" is exactly linear in its single
    moving factor, so its metric is identically zero; it exists for
    completeness, not measurement).

    ``inputs``: optional (n, width) array of input vectors; row ``seed % n``
    replaces the default standard-normal draw for that seed.
    """
    if update_mode not in ("both", "w2"):
        raise ValueError(f"update_mode must be 'both' or 'w2', got {update_mode!r}")
    if update_rule not in ("sign", "gd"):
        raise ValueError(f"update_rule must be 'sign' or 'gd', got {update_rule!r}")
    if not depths:
        raise ValueError("depths must be nonempty")
    if any(layer_index >= d for d in depths):
        raise ValueError(f"layer_index {layer_index} must be < every depth")

    report = LazinessReport(alpha, update_mode, update_rule, eta0, width, layer_index)
    for depth in depths:
        eta = eta0 if alpha is None else eta0 * float(depth) ** (alpha - 1.0)
        for seed in range(n_seeds):
            # Distinct, order-independent stream family per grid point.
            point_seed = (base_seed << 32) ^ (depth << 16) ^ seed
            model = ToyLinearResNet.init(depth, width, alpha, point_seed)
            if inputs is not None:
                h0 = np.asarray(inputs[seed % len(inputs)], dtype=np.float64)
                if h0.shape != (width,):
                    raise ValueError(f"input rows must have shape ({width},), got {h0.shape}")
            else:
                h0 = RngStream(point_seed, 1).generator().standard_normal(width)

            hs = model.forward(h0)
            norm_ratio = float(np.linalg.norm(hs[-1])) / float(np.linalg.norm(h0))
            if not math.isfinite(norm_ratio) or norm_ratio > DIVERGENCE_NORM_RATIO:
                report.points.append(
                    LazinessPoint(depth, seed, math.nan, f"forward norm ratio {norm_ratio:.3e}")
                )
                continue

            g_out = np.full(width, 1.0 / width)  # loss = mean(h^L)
            g_next = model.backward_to_layer(layer_index, g_out)
            d_w1, d_w2 = model.block_param_grads(layer_index, hs[layer_index], g_next)
            if update_rule == "sign":
                d_w1, d_w2 = _sign_like(d_w1), _sign_like(d_w2)
            d_w1 = -eta * d_w1
            d_w2 = -eta * d_w2
            if update_mode == "w2":
                d_w1 = np.zeros_like(d_w1)
                metric = 0.0  # block output is linear in W2 alone
            else:
                metric = laziness_block_metric(model, layer_index, hs[layer_index], d_w1, d_w2)
            report.points.append(LazinessPoint(depth, seed, metric))
    return report


# ---------------------------------------------------------------------------
# Maximal-update probe on the ReLU toy model
# ---------------------------------------------------------------------------


def maximal_update_norms(
    alpha: float,
    depths: list[int],
    *,
    depth_aware_lr: bool = True,
    eta0: float = 1e-3,
    width: int = 256,
    sigma_w: float = 1.0,
    seed: int = 0,
) -> dict[int, float]:
    """||delta h^L||^2 / N after one sign step on every layer of ToyReluResMLP.

    The per-layer step size is eta0 * N^-1 * L^(alpha-1); passing
    ``depth_aware_lr=False`` drops the L^(alpha-1) factor (the depth-unaware
    rule), which breaks the depth-uniformity of the update at alpha < 1.
    """
    from .toy import ToyReluResMLP

    out: dict[int, float] = {}
    for depth in depths:
        model = ToyReluResMLP.init(depth, width, alpha, sigma_w, seed)
        h0 = RngStream(seed, 1).generator().standard_normal(width)
        hs, grads = model.loss_grads(h0)
        base = hs[-1].copy()
        eta = eta0 / width * (float(depth) ** (alpha - 1.0) if depth_aware_lr else 1.0)
        for layer in range(depth):
            model.w[layer] = model.w[layer] - eta * np.sign(grads[layer])
        new = model.forward(h0)[-1]
        out[depth] = float(np.sum((new - base) ** 2)) / width
    return out


# ---------------------------------------------------------------------------
# Coordinate check on the transformer
# ---------------------------------------------------------------------------

# Variant name -> (kind, apply LN/bias depth-corrected learning rates).
COORDCHECK_VARIANTS: dict[str, tuple[ParamKind, bool]] = {
    "sp": (ParamKind.sp(), True),
    "mup": (ParamKind.mup(), True),
    "alpha05_uncorrected": (ParamKind.depth_alpha(0.5), False),
    "alpha05": (ParamKind.depth_alpha(0.5), True),
    "alpha10": (ParamKind.completep(), True),
}

DEFAULT_COORDCHECK_VARIANTS = ("sp", "alpha05_uncorrected", "alpha05", "alpha10")


@dataclass(frozen=True)
class CoordCheckConfig:
    n: int = 256
    sigma: float = 0.06
    eta: float = 2e-3
    batch_size: int = 4
    steps: int = 10
    seq_len: int = 32
    vocab_size: int = 128
    d_head: int = 64
    n_base: int = 256
    l_base: int = 2
    seed: int = 0


@dataclass(frozen=True)
class CoordCheckPoint:
    variant: str
    depth: int
    step: int  # number of optimizer updates already applied
    merge: int  # 0-based index into the 2L interleaved (mha, mlp) merges
    fro_norm: float


@dataclass
class CoordCheckReport:
    config: CoordCheckConfig
    depths: list[int]
    variants: list[str]
    points: list[CoordCheckPoint] = field(default_factory=list)
    events: list[tuple[str, int, int, str]] = field(default_factory=list)  # variant, L, step, msg

    def final_norm(self, variant: str, depth: int, step: int) -> float:
        for p in self.points:
            if p.variant == variant and p.depth == depth and p.step == step and p.merge == 2 * depth - 1:
                return p.fro_norm
        raise KeyError(f"no point for ({variant}, L={depth}, step={step})")

    def max_ratio(self, variant: str, depth: int, ref_depth: int) -> float:
        """Max over recorded steps of final-layer norm at ``depth`` over ``ref_depth``.

        Steps where either run has already died (NaN event) are skipped.
        """
        ratios = []
        for step in range(self.config.steps + 1):
            try:
                ratios.append(self.final_norm(variant, depth, step) / self.final_norm(variant, ref_depth, step))
            except KeyError:
                continue
        if not ratios:
            raise ValueError(f"no comparable steps for {variant} at L={depth} vs L={ref_depth}")
        return max(ratios)

    def to_csv(self) -> str:
        out = StringIO()
        w = csv.writer(out)
        w.writerow(["variant", "depth", "step", "merge", "fro_norm"])
        for p in self.points:
            w.writerow([p.variant, p.depth, p.step, p.merge, repr(p.fro_norm)])
        return out.getvalue()

    def to_summary(self) -> dict:
        ref = min(self.depths)
        summary: dict = {
            "depths": self.depths,
            "variants": self.variants,
            "steps": self.config.steps,
            "n_events": len(self.events),
            "events": [list(e) for e in self.events],
            "max_final_norm_ratio": {},
        }
        for v in self.variants:
            summary["max_final_norm_ratio"][v] = {}
            for d in self.depths:
                try:
                    summary["max_final_norm_ratio"][v][str(d)] = self.max_ratio(v, d, ref)
                except ValueError:
                    summary["max_final_norm_ratio"][v][str(d)] = None
        return summary

    def to_json(self) -> str:
        return json.dumps(self.to_summary(), indent=2) + "\n"


def _coordcheck_run(
    variant: str,
    depth: int,
    cfg: CoordCheckConfig,
    report: CoordCheckReport,
) -> None:
    kind, corrected = COORDCHECK_VARIANTS[variant]
    base = BaseHyperparams(
        sigma_base=cfg.sigma, eta_base=cfg.eta, n_base=cfg.n_base, l_base=cfg.l_base
    )
    plan = resolve_plan(
        kind, base, cfg.n, depth, d_head=cfg.d_head, ln_bias_depth_correction=corrected
    )
    mcfg = ModelConfig(cfg.n, depth, cfg.vocab_size, cfg.seq_len, d_head=cfg.d_head)
    params = init_params(mcfg, plan, cfg.seed, dtype=np.float64)
    opt = AdamW.from_plan(plan, params.roles)
    # Markov-structured tokens: real bigram signal keeps early gradients
    # coherent across steps, which is what separates the variants.
    source = MarkovByteSource(cfg.vocab_size, cfg.seed)

    for step in range(cfg.steps + 1):
        tokens, targets = source.batch(step, cfg.batch_size, cfg.seq_len)
        try:
            out = forward(params, plan, tokens, step=step, check_finite=True)
        except NonFiniteError as exc:
            report.events.append((variant, depth, step, str(exc)))
            return
        for merge, norm in enumerate(out.trace.merge_fro_norms()):
            report.points.append(CoordCheckPoint(variant, depth, step, merge, norm))
        if step == cfg.steps:
            return
        _, dlogits = cross_entropy(out.logits, targets)
        grads = backward(params, plan, out, dlogits)
        try:
            opt.step(params.tensors, grads)
        except NonFiniteError as exc:
            report.events.append((variant, depth, step + 1, str(exc)))
            return


def coordinate_check(
    variants: tuple[str, ...] = DEFAULT_COORDCHECK_VARIANTS,
    depths: tuple[int, ...] = (2, 8, 32, 64),
    config: CoordCheckConfig = CoordCheckConfig(),
) -> CoordCheckReport:
    """Residual-stream Frobenius norms across depth, training step, and layer.

    Each (variant, depth) pair trains a fresh model on synthetic Markov
    tokens; norms are recorded before the first update (step 0) and after
    each of the configured steps.  NaNs abort only the affected run and are
    recorded as events.
    """
    if not depths:
        raise ValueError("depths must be nonempty")
    unknown = [v for v in variants if v not in COORDCHECK_VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; expected {sorted(COORDCHECK_VARIANTS)}")
    report = CoordCheckReport(config=config, depths=list(depths), variants=list(variants))
    for variant in variants:
        for depth in depths:
            _coordcheck_run(variant, depth, config, report)
    return report


# ---------------------------------------------------------------------------
# Plots (optional artifacts)
# ---------------------------------------------------------------------------


def save_laziness_plot(report: LazinessReport, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    qs = report.quartiles()
    depths = sorted(qs)
    med = [qs[d][1] for d in depths]
    lo = [qs[d][0] for d in depths]
    hi = [qs[d][2] for d in depths]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(depths, med, marker="o", label="median")
    ax.fill_between(depths, lo, hi, alpha=0.3, label="quartiles")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("depth L")
    ax.set_ylabel("linearization distance")
    label = "depth-unaware" if report.alpha is None else f"alpha={report.alpha}"
    ax.set_title(f"laziness, {label}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_coordcheck_plot(report: CoordCheckReport, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(report.variants), figsize=(4 * len(report.variants), 4), squeeze=False)
    for ax, variant in zip(axes[0], report.variants):
        for depth in report.depths:
            steps, norms = [], []
            for step in range(report.config.steps + 1):
                try:
                    norms.append(report.final_norm(variant, depth, step))
                    steps.append(step)
                except KeyError:
                    break
            ax.plot(steps, norms, marker=".", label=f"L={depth}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(variant)
    axes[0][0].set_ylabel("final-layer Frobenius norm")
    axes[0][-1].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
