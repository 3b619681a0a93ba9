"""Scaling plans: per-role hyperparameter rules for width/depth-aware parameterizations.

A parameterization is a rule-set mapping tunable base hyperparameters
(init std, learning rate, weight decay, AdamW epsilon) to per-role values
for a model of width ``N`` and depth ``L``, relative to a base shape
``(N_base, L_base)``.  Three families are supported:

* ``sp``          -- standard parameterization, no corrections.
* ``mup``         -- width-aware corrections in ``m_N = N / N_base``.
* ``depth_alpha`` -- width corrections plus depth corrections governed by a
  branch exponent ``alpha`` in [0.5, 1].  ``alpha = 1`` is the CompleteP
  setting; residual branches are scaled by ``m_L**-alpha`` with
  ``m_L = L / L_base``.

All plan resolution is pure arithmetic over immutable inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

SCHEMA_VERSION = 1

ALPHA_MIN = 0.5
ALPHA_MAX = 1.0


class PlanError(ValueError):
    """Invalid plan construction or malformed plan document."""


class ParamRole(Enum):
    EMBEDDING = "embedding"
    PRE_LN = "pre_ln"
    HIDDEN_WEIGHT = "hidden_weight"
    HIDDEN_BIAS = "hidden_bias"
    FINAL_LN = "final_ln"
    UNEMBEDDING = "unembedding"


# AdamW epsilon groups: residual-block tensors share one rule, the
# embedding/unembedding side shares another.
RESIDUAL_EPS_ROLES = frozenset(
    {ParamRole.HIDDEN_WEIGHT, ParamRole.HIDDEN_BIAS, ParamRole.PRE_LN}
)
EMBEDDING_EPS_ROLES = frozenset(
    {ParamRole.EMBEDDING, ParamRole.UNEMBEDDING, ParamRole.FINAL_LN}
)


@dataclass(frozen=True)
class ParamKind:
    """Which parameterization family, plus the branch exponent for depth-aware kinds."""

    name: str  # "sp" | "mup" | "depth_alpha"
    alpha: float | None = None

    def __post_init__(self) -> None:
        if self.name not in ("sp", "mup", "depth_alpha"):
            raise PlanError(f"unknown parameterization kind {self.name!r}")
        if self.name == "depth_alpha":
            if self.alpha is None:
                raise PlanError("depth_alpha kind requires alpha")
            if not (ALPHA_MIN <= self.alpha <= ALPHA_MAX):
                raise PlanError(
                    f"alpha must be in [{ALPHA_MIN}, {ALPHA_MAX}], got {self.alpha}"
                )
        elif self.alpha is not None:
            raise PlanError(f"kind {self.name!r} does not take alpha")

    @classmethod
    def sp(cls) -> "ParamKind":
        return cls("sp")

    @classmethod
    def mup(cls) -> "ParamKind":
        return cls("mup")

    @classmethod
    def depth_alpha(cls, alpha: float) -> "ParamKind":
        return cls("depth_alpha", float(alpha))

    @classmethod
    def completep(cls) -> "ParamKind":
        """The alpha = 1 depth-aware parameterization."""
        return cls("depth_alpha", 1.0)

    @property
    def depth_aware(self) -> bool:
        return self.name == "depth_alpha"

    @property
    def width_aware(self) -> bool:
        return self.name in ("mup", "depth_alpha")


@dataclass(frozen=True)
class BaseHyperparams:
    """Tunable base values, defined at the base shape (n_base, l_base)."""

    sigma_base: float = 0.02
    eta_base: float = 0.0039
    lambda_base: float = 0.0
    epsilon_base: float = 1e-16
    n_base: int = 256
    l_base: int = 2

    def __post_init__(self) -> None:
        if self.sigma_base <= 0:
            raise PlanError("sigma_base must be > 0")
        if self.eta_base <= 0:
            raise PlanError("eta_base must be > 0")
        if self.lambda_base < 0:
            raise PlanError("lambda_base must be >= 0")
        if self.epsilon_base <= 0:
            raise PlanError("epsilon_base must be > 0")
        if self.n_base < 1 or self.l_base < 1:
            raise PlanError("n_base and l_base must be positive integers")


@dataclass(frozen=True)
class RoleEntry:
    """Resolved hyperparameters for one parameter role."""

    init_std: float
    lr: float
    wd: float
    eps: float


@dataclass(frozen=True)
class ScalingPlan:
    kind: ParamKind
    m_n: float
    m_l: float
    roles: dict[ParamRole, RoleEntry] = field(compare=True)
    residual_multiplier: float = 1.0
    unemb_forward_multiplier: float = 1.0
    attn_logit_scale: float = 1.0 / 64.0

    def entry(self, role: ParamRole) -> RoleEntry:
        return self.roles[role]


# How "Q^T K / N" is read: per-head 1/d_head by default, with overrides for
# the SP-style 1/sqrt(d_head) and the literal 1/width readings.
ATTN_SCALE_MODES = ("d_head", "sqrt_d_head", "width")


def attn_logit_scale(mode: str, d_head: int, n: int) -> float:
    if mode == "d_head":
        return 1.0 / d_head
    if mode == "sqrt_d_head":
        return 1.0 / d_head**0.5
    if mode == "width":
        return 1.0 / n
    raise PlanError(f"unknown attention scale mode {mode!r}; expected one of {ATTN_SCALE_MODES}")


def resolve_plan(
    kind: ParamKind,
    base: BaseHyperparams,
    n: int,
    l: int,
    *,
    d_head: int = 64,
    attn_scale_mode: str = "d_head",
    bias_init_std: float = 0.0,
    ln_bias_depth_correction: bool = True,
) -> ScalingPlan:
    """Resolve base hyperparameters into a full per-role plan for shape (n, l).

    ``ln_bias_depth_correction=False`` drops the ``m_L**(alpha-1)`` factor from
    LayerNorm and bias learning rates (the "as described in the literature"
    variant of the depth-aware kinds); it has no effect on sp/mup.
    """
    if n < 1 or l < 1:
        raise PlanError(f"n and l must be positive, got n={n}, l={l}")

    m_n = n / base.n_base
    m_l = l / base.l_base
    sigma = base.sigma_base
    eta = base.eta_base
    lam = base.lambda_base
    eps = base.epsilon_base

    width = kind.width_aware
    depth = kind.depth_aware
    alpha = kind.alpha if depth else None

    hidden_std = sigma * m_n**-0.5 if width else sigma
    hidden_lr = eta * m_n**-1.0 if width else eta
    hidden_wd = lam * m_n if width else lam
    ln_lr = eta
    bias_lr = eta
    eps_residual = eps * m_n**-1.0 if width else eps
    eps_embedding = eps * m_n**-1.0 if width else eps
    residual_multiplier = 1.0
    if depth:
        depth_lr_factor = m_l ** (alpha - 1.0)
        hidden_lr *= depth_lr_factor
        if ln_bias_depth_correction:
            ln_lr *= depth_lr_factor
            bias_lr *= depth_lr_factor
        eps_residual *= m_l**-alpha
        residual_multiplier = m_l**-alpha

    roles = {
        ParamRole.EMBEDDING: RoleEntry(sigma, eta, 0.0, eps_embedding),
        ParamRole.PRE_LN: RoleEntry(sigma, ln_lr, 0.0, eps_residual),
        ParamRole.HIDDEN_WEIGHT: RoleEntry(hidden_std, hidden_lr, hidden_wd, eps_residual),
        ParamRole.HIDDEN_BIAS: RoleEntry(bias_init_std, bias_lr, 0.0, eps_residual),
        ParamRole.FINAL_LN: RoleEntry(sigma, eta, 0.0, eps_embedding),
        ParamRole.UNEMBEDDING: RoleEntry(sigma, eta, 0.0, eps_embedding),
    }
    return ScalingPlan(
        kind=kind,
        m_n=m_n,
        m_l=m_l,
        roles=roles,
        residual_multiplier=residual_multiplier,
        unemb_forward_multiplier=1.0 / m_n if width else 1.0,
        attn_logit_scale=attn_logit_scale(attn_scale_mode, d_head, n),
    )


_ROLE_FIELDS = ("init_std", "lr", "wd", "eps")
_TOP_FIELDS = (
    "schema_version",
    "kind",
    "alpha",
    "m_N",
    "m_L",
    "residual_multiplier",
    "unemb_forward_multiplier",
    "attn_logit_scale",
    "roles",
)


def plan_to_dict(plan: ScalingPlan) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": plan.kind.name,
        "alpha": plan.kind.alpha,
        "m_N": plan.m_n,
        "m_L": plan.m_l,
        "residual_multiplier": plan.residual_multiplier,
        "unemb_forward_multiplier": plan.unemb_forward_multiplier,
        "attn_logit_scale": plan.attn_logit_scale,
        "roles": {
            role.value: {f: getattr(entry, f) for f in _ROLE_FIELDS}
            for role, entry in plan.roles.items()
        },
    }


def serialize_plan(plan: ScalingPlan) -> str:
    """Serialize to a JSON document; numbers keep full (round-trip) precision."""
    return json.dumps(plan_to_dict(plan), indent=2) + "\n"


def plan_from_dict(doc: dict[str, Any]) -> ScalingPlan:
    for key in _TOP_FIELDS:
        if key not in doc:
            raise PlanError(f"plan document missing field {key!r}")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise PlanError(f"unsupported schema_version {doc['schema_version']!r}")
    kind = ParamKind(doc["kind"], doc["alpha"])  # revalidates alpha range

    roles: dict[ParamRole, RoleEntry] = {}
    for role in ParamRole:
        if role.value not in doc["roles"]:
            raise PlanError(f"plan document missing role {role.value!r}")
        cell = doc["roles"][role.value]
        for f in _ROLE_FIELDS:
            if f not in cell:
                raise PlanError(f"role {role.value!r} missing field {f!r}")
            if not isinstance(cell[f], (int, float)) or isinstance(cell[f], bool):
                raise PlanError(f"role {role.value!r} field {f!r} is not a number")
        roles[role] = RoleEntry(*(float(cell[f]) for f in _ROLE_FIELDS))

    for key in ("m_N", "m_L", "residual_multiplier", "unemb_forward_multiplier", "attn_logit_scale"):
        if not isinstance(doc[key], (int, float)) or isinstance(doc[key], bool):
            raise PlanError(f"plan field {key!r} is not a number")

    return ScalingPlan(
        kind=kind,
        m_n=float(doc["m_N"]),
        m_l=float(doc["m_L"]),
        roles=roles,
        residual_multiplier=float(doc["residual_multiplier"]),
        unemb_forward_multiplier=float(doc["unemb_forward_multiplier"]),
        attn_logit_scale=float(doc["attn_logit_scale"]),
    )


def parse_plan(document: str) -> ScalingPlan:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise PlanError(f"malformed plan document: {exc}") from exc
    if not isinstance(doc, dict):
        raise PlanError("plan document must be a JSON object")
    return plan_from_dict(doc)


def diff_plans(a: ScalingPlan, b: ScalingPlan) -> list[tuple[str, Any, Any]]:
    """Field-by-field comparison of resolved numeric content.

    The kind/alpha labels are excluded: two kinds that resolve to identical
    numbers (e.g. any pair at m_N = m_L = 1) diff as equal.
    """
    da, db = plan_to_dict(a), plan_to_dict(b)
    out: list[tuple[str, Any, Any]] = []
    for key in _TOP_FIELDS:
        if key in ("roles", "kind", "alpha", "schema_version"):
            continue
        if da[key] != db[key]:
            out.append((key, da[key], db[key]))
    for role in ParamRole:
        for f in _ROLE_FIELDS:
            va, vb = da["roles"][role.value][f], db["roles"][role.value][f]
            if va != vb:
                out.append((f"roles.{role.value}.{f}", va, vb))
    return out
