"""Command-line interface: estimate | test | bounds | simulate.

Every run resolves its options into a RunManifest (written next to any JSON
output) so results can be reproduced bit for bit from the recorded options
and seed. Exit codes: 0 ok, 2 usage/input problems, 3 numerical failures.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .bounds import binned_levels, bound_confidence, mts_bound_continuous, mts_bound_discrete
from .data import load_csv, summarize
from .errors import (
    BandwidthError,
    ConvergenceError,
    DegenerateMomentError,
    InputError,
    PartitionError,
    SingularSystemError,
    TobitcheckError,
)
from .estimate import fit_classic_tobit, fit_iv_tobit
from .momtest import DEFAULT_SEED, run_test_levels
from .montecarlo import load_config_file, run_study

_NUMERICAL_ERRORS = (ConvergenceError, SingularSystemError, DegenerateMomentError,
                     BandwidthError)


@dataclass
class RunManifest:
    subcommand: str
    options: dict
    input_sha256: str | None
    seed: int
    tool_version: str
    created_utc: str

    def to_dict(self) -> dict:
        return {"schema": "tobitcheck/run-manifest/v1", **asdict(self)}


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _manifest(subcommand: str, options: dict, input_path, seed: int) -> RunManifest:
    return RunManifest(
        subcommand=subcommand,
        options={k: v for k, v in sorted(options.items())},
        input_sha256=_sha256(input_path) if input_path else None,
        seed=seed,
        tool_version=__version__,
        created_utc=datetime.now(timezone.utc).isoformat(),
    )


def _emit(report: dict, manifest: RunManifest, json_path) -> None:
    """Write the deterministic report plus a timestamped manifest sidecar."""
    doc = dict(report)
    doc["reproduce"] = {k: v for k, v in manifest.to_dict().items()
                        if k != "created_utc"}
    if json_path:
        Path(json_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        Path(str(json_path) + ".manifest.json").write_text(
            json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def _fail(exc: TobitcheckError) -> None:
    click.echo(f"error: {exc}", err=True)
    if isinstance(exc, _NUMERICAL_ERRORS):
        sys.exit(3)
    sys.exit(2)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TobitcheckError as exc:
            _fail(exc)
    return wrapper


def _parse_alphas(text: str) -> tuple[float, ...]:
    try:
        alphas = tuple(float(tok) for tok in text.split(","))
    except ValueError:
        raise click.UsageError(f"cannot parse --alpha list {text!r}")
    for a in alphas:
        if not 0.0 < a <= 0.5:
            raise click.UsageError(f"--alpha values must lie in (0, 0.5], got {a}")
    return alphas


def _load(input_path, y, d, z, x):
    names = tuple(tok for tok in x.split(",") if tok) if x else ()
    return load_csv(input_path, y=y, d=d, z=z, x=names)


def _stars(est: float, se: float) -> str:
    if not se or not np.isfinite(se) or se <= 0:
        return ""
    t = abs(est / se)
    if t > 2.5758293035489004:
        return "***"
    if t > 1.959963984540054:
        return "**"
    if t > 1.6448536269514722:
        return "*"
    return ""


_common = [
    click.option("--input", "input_path", type=click.Path(), help="CSV input file."),
    click.option("--y", "y_col", default="y", show_default=True, help="Outcome column."),
    click.option("--d", "d_col", default="d", show_default=True, help="Treatment column."),
    click.option("--z", "z_col", default=None, help="Instrument column."),
    click.option("--x", "x_cols", default=None,
                 help="Comma-separated covariate columns."),
    click.option("--seed", default=DEFAULT_SEED, show_default=True, type=int),
    click.option("--json", "json_path", type=click.Path(), default=None,
                 help="Write a JSON report (plus .manifest.json) here."),
    click.option("--threads", default=1, show_default=True, type=int),
]


def _with_common(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Censored-outcome model estimation, validity testing, and fallback bounds."""


@main.command("estimate")
@_with_common
@click.option("--model", type=click.Choice(["classic", "iv"]), default="classic",
              show_default=True)
@_handle_errors
def cmd_estimate(input_path, y_col, d_col, z_col, x_cols, seed, json_path,
                 threads, model):
    """Fit the censored-normal model by maximum likelihood."""
    if not input_path:
        raise click.UsageError("--input is required")
    if model == "iv" and not z_col:
        raise click.UsageError("--model iv requires --z")
    sample = _load(input_path, y_col, d_col, z_col, x_cols)
    use_x = sample.x is not None
    if model == "classic":
        fit = fit_classic_tobit(sample, include_covariates=use_x)
    else:
        fit = fit_iv_tobit(sample, include_covariates=use_x)

    info = summarize(sample)
    click.echo(f"n = {info.n}  censored fraction = {info.censoring_fraction:.4f}"
               f"  dropped rows = {info.dropped_rows}")
    se = fit.se
    click.echo(f"{'parameter':<14} {'estimate':>12} {'std err':>10}")
    for name in fit.param_names:
        val = _fit_value(fit, name)
        click.echo(f"{name:<14} {val:>12.4f} {se[name]:>10.4f} {_stars(val, se[name])}")
    if model == "iv":
        sse = fit.structural_se()
        click.echo("structural coefficients (alpha1 = beta1/gamma1):")
        for nm, val in [("alpha0", fit.alpha0), ("alpha1", fit.alpha1)]:
            click.echo(f"{nm:<14} {val:>12.4f} {sse[nm]:>10.4f} {_stars(val, sse[nm])}")
        if fit.weak_first_stage:
            click.echo("warning: weak first stage (|t(gamma1)| < 2)")
        if fit.rho_boundary:
            click.echo("warning: correlation estimate at the boundary (|rho| -> 1)")
    click.echo(f"log-likelihood = {fit.loglik:.4f}  converged = {fit.converged}")

    options = {"model": model, "y": y_col, "d": d_col, "z": z_col, "x": x_cols,
               "input": str(input_path)}
    manifest = _manifest("estimate", options, input_path, seed)
    report = {
        "schema": "tobitcheck/fit-report/v1",
        "model": model,
        "n": sample.n,
        "estimates": {name: _fit_value(fit, name) for name in fit.param_names},
        "std_errors": {k: float(v) for k, v in se.items()},
        "loglik": fit.loglik,
        "converged": fit.converged,
    }
    if model == "iv":
        report["structural"] = {"alpha0": fit.alpha0, "alpha1": fit.alpha1,
                                "std_errors": fit.structural_se(),
                                "weak_first_stage": fit.weak_first_stage,
                                "rho_boundary": fit.rho_boundary}
    _emit(report, manifest, json_path)


def _fit_value(fit, name: str) -> float:
    mapping = {
        "alpha0": "alpha0", "alpha1": "alpha1", "sigma": "sigma",
        "beta0": "beta0", "beta1": "beta1", "gamma0": "gamma0",
        "gamma1": "gamma1", "sigma_w": "sigma_w", "sigma_v": "sigma_v",
        "rho": "rho",
    }
    if name in mapping:
        return float(getattr(fit, mapping[name]))
    if name.startswith("alpha_"):
        idx = list(fit.param_names).index(name) - 2
        return float(fit.alpha2[idx])
    if name.startswith("beta_x"):
        return float(fit.beta2[int(name[6:])])
    if name.startswith("gamma_x"):
        return float(fit.gamma2[int(name[7:])])
    raise KeyError(name)


@main.command("test")
@_with_common
@click.option("--model", type=click.Choice(["classic", "iv"]), default="classic",
              show_default=True)
@click.option("--k", default=4, show_default=True, type=int,
              help="Positive-outcome cells in the partition.")
@click.option("--q", default=4, show_default=True, type=int,
              help="Treatment cuts (IV model only).")
@click.option("--alpha", "alpha_list", default="0.10,0.05,0.01", show_default=True,
              help="Comma-separated significance levels.")
@click.option("--reps", "r_draws", default=1000, show_default=True, type=int,
              help="Multiplier draws for the critical value.")
@click.option("--grid-points", default=30, show_default=True, type=int)
@_handle_errors
def cmd_test(input_path, y_col, d_col, z_col, x_cols, seed, json_path, threads,
             model, k, q, alpha_list, r_draws, grid_points):
    """Test the model's validity via conditional moment inequalities.

    A rejection is data, not a failure: the exit code is 0 either way.
    """
    if not input_path:
        raise click.UsageError("--input is required")
    if model == "iv" and not z_col:
        raise click.UsageError("--model iv requires --z")
    alphas = _parse_alphas(alpha_list)
    sample = _load(input_path, y_col, d_col, z_col, x_cols)
    results = run_test_levels(
        sample, model, alphas=alphas, k=k, q=q, r_draws=r_draws,
        grid_points=grid_points, seed=seed,
        use_covariates=sample.x is not None, threads=threads,
    )
    click.echo(f"{'alpha':>6} {'statistic':>12} {'critical':>10} {'reject':>8}")
    for r in results:
        click.echo(f"{r.alpha:>6.2f} {r.statistic:>12.4f} {r.kappa:>10.3f} "
                   f"{str(r.reject):>8}")
    worst = sorted(results[0].per_cell, key=lambda row: -row["adjusted"])[:10]
    click.echo("most binding inequalities (first level):")
    click.echo(f"{'cell':<28} {'sign':>5} {'at':>8} {'theta':>9} {'s':>8} {'t-stat':>7}")
    for row in worst:
        click.echo(f"{row['cell']:<28} {row['sign']:>+5d} {row['grid']:>8.3f} "
                   f"{row['theta']:>9.4f} {row['s']:>8.4f} {row['studentized']:>7.2f}")

    options = {"model": model, "k": k, "q": q, "alphas": list(alphas),
               "r_draws": r_draws, "grid_points": grid_points, "y": y_col,
               "d": d_col, "z": z_col, "x": x_cols, "input": str(input_path),
               "threads": threads}
    manifest = _manifest("test", options, input_path, seed)
    report = {
        "schema": "tobitcheck/test-report/v1",
        "results": [r.to_dict() for r in results],
    }
    _emit(report, manifest, json_path)


@main.command("bounds")
@_with_common
@click.option("--method", type=click.Choice(["discrete", "continuous"]),
              default="continuous", show_default=True)
@click.option("--direction", type=click.Choice(["decreasing", "increasing"]),
              default="decreasing", show_default=True,
              help="Monotonicity direction of the latent selection term.")
@click.option("--bins", default=10, show_default=True, type=int,
              help="Quantile bins for the discrete method on continuous D.")
@click.option("--grid-size", default=9, show_default=True, type=int)
@click.option("--boot-reps", default=200, show_default=True, type=int)
@click.option("--ci-alpha", default=0.05, show_default=True, type=float)
@_handle_errors
def cmd_bounds(input_path, y_col, d_col, z_col, x_cols, seed, json_path, threads,
               method, direction, bins, grid_size, boot_reps, ci_alpha):
    """One-sided slope bound under monotone treatment selection."""
    if not input_path:
        raise click.UsageError("--input is required")
    sample = _load(input_path, y_col, d_col, z_col, x_cols)
    if method == "discrete":
        levels = np.unique(sample.d)
        if levels.size <= bins:
            pairs = [(float(b), float(a)) for a, b in zip(levels[:-1], levels[1:])]
            point = mts_bound_discrete(sample, pairs, direction)
        else:
            lv, _, _ = binned_levels(sample, bins)
            pairs = [(float(b), float(a)) for a, b in zip(lv[:-1], lv[1:])]
            point = mts_bound_discrete(sample, pairs, direction,
                                       atol=float(np.diff(lv).max()))
        result = bound_confidence(sample, "discrete", direction,
                                  boot_reps=boot_reps, alpha=ci_alpha, seed=seed,
                                  pairs=pairs,
                                  atol=None if levels.size <= bins
                                  else float(np.diff(lv).max()))
    else:
        point = mts_bound_continuous(sample, direction=direction,
                                     covariates=sample.x is not None,
                                     grid_size=grid_size)
        result = bound_confidence(sample, "continuous", direction,
                                  boot_reps=boot_reps, alpha=ci_alpha, seed=seed,
                                  covariates=sample.x is not None,
                                  grid_size=grid_size)
    side = "lower" if result.lower_bound is not None else "upper"
    click.echo(f"{side} bound on the treatment slope: {result.bound:.4f}")
    click.echo(f"one-sided {100 * (1 - ci_alpha):.0f}% confidence limit: "
               f"{result.ci_limit:.4f}  (bootstrap, {boot_reps} reps)")
    click.echo("evaluation points:")
    for row in result.evaluation:
        if result.method == "continuous":
            click.echo(f"  d = {row['d']:>8.3f}  derivative = {row['derivative']:>8.4f}"
                       f"  se = {row['se']:.4f}")
        else:
            click.echo(f"  d = {row['d']:>8.3f} vs {row['d_star']:>8.3f}"
                       f"  quotient = {row['quotient']:>8.4f}")
    options = {"method": method, "direction": direction, "bins": bins,
               "grid_size": grid_size, "boot_reps": boot_reps,
               "ci_alpha": ci_alpha, "y": y_col, "d": d_col, "x": x_cols,
               "input": str(input_path)}
    manifest = _manifest("bounds", options, input_path, seed)
    _emit(result.to_dict(), manifest, json_path)


@main.command("simulate")
@click.option("--config", "config_path", type=click.Path(), required=True,
              help="Study configuration ([section] blocks of key=value lines).")
@click.option("--out", "out_dir", type=click.Path(), default="study-out",
              show_default=True, help="Output directory for reports and cache.")
@click.option("--reps", default=None, type=int, help="Override reps per config.")
@click.option("--seed", default=None, type=int, help="Override every config seed.")
@click.option("--threads", default=1, show_default=True, type=int)
@click.option("--resume", is_flag=True, help="Reuse cached replications.")
@_handle_errors
def cmd_simulate(config_path, out_dir, reps, seed, threads, resume):
    """Run a seeded simulation study and write CSV + JSON reports."""
    configs = load_config_file(config_path, seed_override=seed, reps_override=reps)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(name, rec):
        status = "ok" if rec.get("ok") else f"FAILED ({rec.get('error')})"
        click.echo(f"  [{name}] replication {rec['rep']}: {status}")

    report = run_study(configs, threads=threads, workdir=out / "cache",
                       resume=resume, progress=progress)
    report.write_csv(out / "study.csv")
    manifest = _manifest(
        "simulate",
        {"config": str(config_path), "reps": reps, "threads": threads,
         "resume": resume, "out": str(out)},
        config_path,
        seed if seed is not None else configs[0].seed,
    )
    _emit(report.to_json_dict(), manifest, out / "study.json")
    click.echo(f"{'config':<18} {'alpha':>6} {'reject':>8} {'mse(a1)':>10} {'fail':>5}")
    for row in report.rows:
        for alpha, rate in sorted(row["reject_rates"].items(),
                                  key=lambda kv: -float(kv[0])):
            click.echo(f"{row['name']:<18} {alpha:>6} {rate:>8.3f} "
                       f"{row['mse_alpha1']:>10.5f} {row['failures']:>5}")
    click.echo(f"reports written to {out}/study.csv and {out}/study.json")


if __name__ == "__main__":
    main()
