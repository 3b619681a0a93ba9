"""Width/depth-aware neural-network parameterizations (SP, muP, and the
alpha-indexed depth-aware family whose alpha=1 member is CompleteP), with a
desk-scale transformer trainer, analytic oracles, and diagnostics."""

from .plan import (
    BaseHyperparams,
    ParamKind,
    ParamRole,
    PlanError,
    RoleEntry,
    ScalingPlan,
    diff_plans,
    parse_plan,
    resolve_plan,
    serialize_plan,
)

__version__ = "1.0.0"

__all__ = [
    "BaseHyperparams",
    "ParamKind",
    "ParamRole",
    "PlanError",
    "RoleEntry",
    "ScalingPlan",
    "diff_plans",
    "parse_plan",
    "resolve_plan",
    "serialize_plan",
    "__version__",
]
