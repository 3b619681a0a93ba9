"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 numerical failure, 4 I/O error.
Every subcommand honors --seed and --out; re-running with identical inputs
overwrites outputs identically.
"""

from __future__ import annotations

import functools
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import click

from . import diagnostics, scaling
from .kernel import NonFiniteError
from .plan import (
    BaseHyperparams,
    ParamKind,
    PlanError,
    diff_plans,
    parse_plan,
    resolve_plan,
    serialize_plan,
)
from .train import RunConfig, eta_grid, lr_sweep, train_run

EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _guarded(fn):
    """Map domain failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NonFiniteError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERICAL)
        except OSError as exc:
            click.echo(f"i/o error: {exc}", err=True)
            sys.exit(EXIT_IO)
        except (PlanError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_USAGE)

    return wrapper


def _jobs_default() -> int:
    return int(os.environ.get("COMPLETEP_JOBS", "1"))


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _kind(kind: str, alpha: float | None) -> ParamKind:
    if kind == "completep":
        return ParamKind.completep()
    if kind == "depth_alpha":
        if alpha is None:
            raise PlanError("--kind depth_alpha requires --alpha")
        return ParamKind.depth_alpha(alpha)
    if alpha is not None:
        raise PlanError(f"--kind {kind} does not take --alpha")
    return ParamKind(kind)


def _base_options(fn):
    for opt in reversed(
        [
            click.option("--sigma-base", type=float, default=0.02, show_default=True),
            click.option("--eta-base", type=float, default=0.0039, show_default=True),
            click.option("--lambda-base", type=float, default=0.0, show_default=True),
            click.option("--epsilon-base", type=float, default=1e-16, show_default=True),
            click.option("--n-base", type=int, default=256, show_default=True),
            click.option("--l-base", type=int, default=2, show_default=True),
        ]
    ):
        fn = opt(fn)
    return fn


@click.group()
def main() -> None:
    """Width/depth-aware parameterizations: plans, training, diagnostics, scaling."""


@main.command("plan")
@click.option("--kind", required=True, type=click.Choice(["sp", "mup", "depth_alpha", "completep"]))
@click.option("--alpha", type=float, default=None)
@click.option("--n", required=True, type=int)
@click.option("--l", required=True, type=int)
@_base_options
@click.option("--d-head", type=int, default=64, show_default=True)
@click.option("--attn-scale", type=click.Choice(["d_head", "sqrt_d_head", "width"]), default="d_head")
@click.option("--ln-bias-correction/--no-ln-bias-correction", default=True)
@click.option("--out", type=click.Path(), default=None, help="Write the plan JSON here.")
@click.option(
    "--diff",
    "diff_target",
    is_flag=False,
    flag_value="@completep",
    default=None,
    help="Diff against a plan file, or against the completep plan at the same shape if given bare.",
)
@_guarded
def cmd_plan(kind, alpha, n, l, sigma_base, eta_base, lambda_base, epsilon_base,
             n_base, l_base, d_head, attn_scale, ln_bias_correction, out, diff_target):
    """Resolve a scaling plan for one (kind, N, L)."""
    base = BaseHyperparams(sigma_base, eta_base, lambda_base, epsilon_base, n_base, l_base)
    plan = resolve_plan(
        _kind(kind, alpha), base, n, l,
        d_head=d_head, attn_scale_mode=attn_scale, ln_bias_depth_correction=ln_bias_correction,
    )
    document = serialize_plan(plan)
    if diff_target is not None:
        if diff_target == "@completep":
            other = resolve_plan(ParamKind.completep(), base, n, l, d_head=d_head,
                                 attn_scale_mode=attn_scale)
        else:
            with open(diff_target) as f:
                other = parse_plan(f.read())
        diffs = diff_plans(plan, other)
        if not diffs:
            click.echo("plans are identical (0 differences)")
        for field, va, vb in diffs:
            click.echo(f"{field}: {va!r} vs {vb!r}")
    if out is not None:
        with open(out, "w") as f:
            f.write(document)
    elif diff_target is None:
        click.echo(document, nl=False)


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--kind", type=click.Choice(["sp", "mup", "depth_alpha", "completep"]), default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--n", type=int, default=None)
@click.option("--l", type=int, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seq-len", type=int, default=None)
@click.option("--eta-base", type=float, default=None)
@click.option("--data", type=str, default=None, help='"synthetic" or a file path.')
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--lr-grid", type=str, default=None, help="Sweep eta_base over powers of 2, LOW..HIGH.")
@click.option("--jobs", type=int, default=None)
@_guarded
def cmd_train(config_path, kind, alpha, n, l, steps, batch_size, seq_len,
              eta_base, data, seed, out, lr_grid, jobs):
    """Train one run, or sweep eta_base with --lr-grid."""
    doc = {}
    if config_path is not None:
        with open(config_path) as f:
            doc = json.load(f)
    overrides = {
        "kind": kind, "alpha": alpha, "n": n, "l": l, "steps": steps,
        "batch_size": batch_size, "seq_len": seq_len, "eta_base": eta_base,
        "data": data, "seed": seed, "out_dir": out,
    }
    if kind == "completep":
        overrides["kind"] = "depth_alpha"
        overrides["alpha"] = 1.0
    doc.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**doc)
    if lr_grid is not None:
        table = lr_sweep(cfg, eta_grid(lr_grid), jobs=jobs or _jobs_default())
        click.echo("eta_base,final_loss")
        for eta, loss in table:
            click.echo(f"{eta!r},{loss!r}")
        finite = [(loss, eta) for eta, loss in table if math.isfinite(loss)]
        if finite:
            best_loss, best_eta = min(finite)
            click.echo(f"# best: eta_base={best_eta!r} final_loss={best_loss!r}")
        return
    result = train_run(cfg)
    click.echo(f"steps={result.n_steps} final_loss={result.final_loss!r}")


def _coordcheck_job(args):
    variant, depth, cfg = args
    report = diagnostics.CoordCheckReport(config=cfg, depths=[depth], variants=[variant])
    diagnostics._coordcheck_run(variant, depth, cfg, report)
    return report.points, report.events


@main.command("coordcheck")
@click.option("--depths", type=str, default="2,8,32,64", show_default=True)
@click.option("--variants", type=str, default=",".join(diagnostics.DEFAULT_COORDCHECK_VARIANTS),
              show_default=True)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--n", type=int, default=256, show_default=True)
@click.option("--sigma", type=float, default=0.06, show_default=True)
@click.option("--eta", type=float, default=2e-3, show_default=True)
@click.option("--batch-size", type=int, default=4, show_default=True)
@click.option("--seq-len", type=int, default=32, show_default=True)
@click.option("--vocab", type=int, default=128, show_default=True)
@click.option("--d-head", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None)
@click.option("--svg/--no-svg", default=False)
@click.option("--out", type=click.Path(), required=True)
@_guarded
def cmd_coordcheck(depths, variants, steps, n, sigma, eta, batch_size, seq_len,
                   vocab, d_head, seed, jobs, svg, out):
    """Residual-stream norm grid across variants, depths, and steps."""
    depth_list = _parse_int_list(depths)
    variant_list = [v.strip() for v in variants.split(",") if v.strip()]
    cfg = diagnostics.CoordCheckConfig(
        n=n, sigma=sigma, eta=eta, batch_size=batch_size, steps=steps,
        seq_len=seq_len, vocab_size=vocab, d_head=d_head, seed=seed,
    )
    jobs = jobs or _jobs_default()
    report = diagnostics.CoordCheckReport(config=cfg, depths=depth_list, variants=variant_list)
    tasks = [(v, d, cfg) for v in variant_list for d in depth_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for points, events in pool.map(_coordcheck_job, tasks):
                report.points.extend(points)
                report.events.extend(events)
    else:
        for task in tasks:
            points, events = _coordcheck_job(task)
            report.points.extend(points)
            report.events.extend(events)
    _write_report(out, "coordcheck", report.to_csv(), report.to_json())
    if svg:
        os.makedirs(os.path.join(out, "plots"), exist_ok=True)
        diagnostics.save_coordcheck_plot(report, os.path.join(out, "plots", "coordcheck.svg"))
    click.echo(report.to_json(), nl=False)


def _laziness_job(args):
    alpha, depth, seeds, eta0, width, layer_index, mode, rule, seed, inputs = args
    report = diagnostics.laziness_experiment(
        alpha, [depth], n_seeds=seeds, eta0=eta0, width=width,
        layer_index=layer_index, update_mode=mode, update_rule=rule,
        base_seed=seed, inputs=inputs,
    )
    return report.points


@main.command("laziness")
@click.option("--alpha", type=float, default=None, help="Branch exponent; omit with --mup.")
@click.option("--mup", is_flag=True, help="Depth-unaware variant (no branch or LR depth scaling).")
@click.option("--depths", type=str, default="8,16,32,64,128,256,512", show_default=True)
@click.option("--seeds", type=int, default=50, show_default=True)
@click.option("--eta0", type=float, default=1e-4, show_default=True)
@click.option("--width", type=int, default=256, show_default=True)
@click.option("--layer-index", type=int, default=0, show_default=True)
@click.option("--update", "mode", type=click.Choice(["both", "w2"]), default="both", show_default=True)
@click.option("--rule", type=click.Choice(["sign", "gd"]), default="sign", show_default=True)
@click.option("--data", type=str, default="synthetic", show_default=True,
              help='"synthetic" or a .npy file of input vectors.')
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--jobs", type=int, default=None)
@click.option("--svg/--no-svg", default=False)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def cmd_laziness(alpha, mup, depths, seeds, eta0, width, layer_index, mode, rule,
                 data, seed, jobs, svg, out):
    """Linearization-distance experiment on the linear toy model."""
    if mup == (alpha is not None):
        raise PlanError("pass exactly one of --alpha or --mup")
    inputs = None
    if data != "synthetic":
        import numpy as np

        inputs = np.load(data)
    depth_list = _parse_int_list(depths)
    jobs = jobs or _jobs_default()
    a = None if mup else alpha
    report = diagnostics.LazinessReport(a, mode, rule, eta0, width, layer_index)
    tasks = [(a, d, seeds, eta0, width, layer_index, mode, rule, seed, inputs)
             for d in depth_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for points in pool.map(_laziness_job, tasks):
                report.points.extend(points)
    else:
        for task in tasks:
            report.points.extend(_laziness_job(task))
    if out is not None:
        _write_report(out, "laziness", report.to_csv(), report.to_json())
        if svg:
            os.makedirs(os.path.join(out, "plots"), exist_ok=True)
            diagnostics.save_laziness_plot(report, os.path.join(out, "plots", "laziness.svg"))
    click.echo(report.to_json(), nl=False)


@main.command("sigprop")
@click.option("--alpha", required=True, type=float)
@click.option("--sigma2", required=True, type=float)
@click.option("--l", "depth", required=True, type=int)
@click.option("--h0", type=float, default=1.0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def cmd_sigprop(alpha, sigma2, depth, h0, out):
    """Analytic signal-propagation recursion and its depth limit."""
    res = diagnostics.sigprop(alpha, sigma2, depth, h0)
    click.echo(f"H^L/H0 = {res.ratio!r}  case {res.limit_case}")
    if out is not None:
        doc = {
            "alpha": alpha, "sigma_w2": sigma2, "depth": depth, "h0": h0,
            "h_final": res.h_final, "ratio": res.ratio,
            "limit_case": res.limit_case,
            "limit_value": None if math.isinf(res.limit_value) else res.limit_value,
        }
        with open(out, "w") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")


@main.command("fit")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="CSV with a header and (flops, loss) rows.")
@click.option("--out", type=click.Path(), default=None)
@_guarded
def cmd_fit(in_path, out):
    """Fit the frontier power law X_hat(F) = (F/a)^-b."""
    import csv as _csv

    points = []
    with open(in_path) as f:
        reader = _csv.reader(f)
        next(reader)  # header
        for row in reader:
            if row:
                points.append((float(row[0]), float(row[1])))
    fit = scaling.fit_power_law(points)
    click.echo(f"a={fit.a!r} b={fit.b!r}")
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "fit.json"), "w") as f:
            json.dump({"a": fit.a, "b": fit.b, "log_rss": fit.log_rss,
                       "n_points": fit.n_points}, f, indent=2)
            f.write("\n")
        with open(os.path.join(out, "xhat.csv"), "w") as f:
            f.write("flops,loss,xhat,d\n")
            for flops, loss in points:
                xhat = fit.predict(flops)
                f.write(f"{flops!r},{loss!r},{xhat!r},{scaling.loss_increase(loss, xhat)!r}\n")


@main.command("grid")
@click.option("--p", "p_target", required=True, type=float)
@click.option("--count", type=int, default=10, show_default=True)
@click.option("--d-head", type=int, default=64, show_default=True)
@click.option("--vocab", type=int, default=50257, show_default=True)
@click.option("--seq-len", type=int, default=2048, show_default=True)
@click.option("--tpp", type=float, default=20.0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_guarded
def cmd_grid(p_target, count, d_head, vocab, seq_len, tpp, out):
    """N:L shape grid at constant non-embedding parameter count."""
    points = scaling.nl_grid(p_target, d_head=d_head, count=count,
                             vocab=vocab, seq_len=seq_len, tpp=tpp)
    header = "n,l,n_over_l,p_nonemb,p_total,tokens,train_flops,steps,batch_size"
    lines = [header]
    for p in points:
        lines.append(f"{p.n},{p.l},{p.n_over_l!r},{p.p_nonemb},{p.p_total},"
                     f"{p.tokens},{p.train_flops!r},{p.steps},{p.batch_size}")
    text = "\n".join(lines) + "\n"
    click.echo(text, nl=False)
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "grid.csv"), "w") as f:
            f.write(text)


@main.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def cmd_serve(host, port):
    """Run the HTTP service (analytic endpoints only)."""
    import uvicorn

    from .service import app

    uvicorn.run(app, host=host, port=port)


def _write_report(out_dir: str, name: str, csv_text: str, json_text: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.csv"), "w") as f:
        f.write(csv_text)
    with open(os.path.join(out_dir, f"{name}.json"), "w") as f:
        f.write(json_text)


if __name__ == "__main__":
    main()
