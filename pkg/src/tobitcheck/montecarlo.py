"""Seeded simulation studies: size, power, and estimator quality at desk scale.

Each replication draws from the latent-triangular design Y = max(0, D + U),
D = 2Z - V with unit-variance (U, V, Z), corr(U, V) = rho, Z independent; the
error family can be swapped for t, lognormal or uniform draws (used as drawn,
no re-standardization). Replications are keyed counter-based streams, so a
study is reproducible under any parallel schedule.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Sample
from .errors import InputError, TobitcheckError
from .estimate import fit_classic_tobit, fit_iv_tobit
from .momtest import run_test_levels

__all__ = [
    "DgpConfig",
    "StudyReport",
    "draw_dgp",
    "run_replication",
    "run_study",
    "load_config_file",
]

log = logging.getLogger(__name__)

_FAMILIES = ("normal", "t", "lognormal", "uniform")
_TRUE_ALPHA0 = 0.0
_TRUE_ALPHA1 = 1.0


@dataclass(frozen=True)
class DgpConfig:
    name: str
    model: str = "classic"
    n: int = 5000
    rho: float = 0.0
    reps: int = 100
    seed: int = 20221201
    error_family: str = "normal"
    df: float = 5.0
    k: int = 4
    q: int = 4
    alphas: tuple = (0.10, 0.05, 0.01)
    r_draws: int = 1000
    grid_points: int = 30

    def __post_init__(self):
        if self.model not in ("classic", "iv"):
            raise InputError(f"{self.name}: model must be classic or iv")
        if self.n < 200:
            raise InputError(f"{self.name}: n must be at least 200")
        if self.reps < 1:
            raise InputError(f"{self.name}: reps must be at least 1")
        if not -1.0 < self.rho < 1.0:
            raise InputError(f"{self.name}: rho must lie inside (-1, 1)")
        if self.error_family not in _FAMILIES:
            raise InputError(f"{self.name}: unknown error family {self.error_family!r}")
        if self.error_family == "t" and self.df < 3:
            raise InputError(f"{self.name}: t family needs df >= 3")
        if self.error_family != "normal" and self.rho != 0.0:
            raise InputError(
                f"{self.name}: non-normal error families are defined with rho = 0"
            )


def _rep_rng(seed: int, rep_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed=np.random.SeedSequence([seed, rep_index])))


def draw_dgp(cfg: DgpConfig, rep_index: int) -> Sample:
    """One replication draw; deterministic in (cfg.seed, rep_index)."""
    rng = _rep_rng(cfg.seed, rep_index)
    z = rng.standard_normal(cfg.n)
    v = rng.standard_normal(cfg.n)
    if cfg.error_family == "normal":
        u = cfg.rho * v + math.sqrt(1.0 - cfg.rho**2) * rng.standard_normal(cfg.n)
    elif cfg.error_family == "t":
        u = rng.standard_t(cfg.df, cfg.n)
    elif cfg.error_family == "lognormal":
        u = rng.lognormal(0.0, 1.0, cfg.n)
    else:
        half = math.sqrt(3.0)
        u = rng.uniform(-half, half, cfg.n)
    d = 2.0 * z - v
    return Sample(y=np.maximum(0.0, d + u), d=d, z=z)


def run_replication(cfg: DgpConfig, rep_index: int) -> dict:
    """Draw, fit, test; failures are reported, never raised."""
    record = {"rep": rep_index, "ok": False}
    try:
        sample = draw_dgp(cfg, rep_index)
        test_seed = int(np.random.SeedSequence(
            [cfg.seed, rep_index, 7919]).generate_state(1)[0])
        if cfg.model == "classic":
            fit = fit_classic_tobit(sample)
            a0, a1 = fit.alpha0, fit.alpha1
        else:
            fit = fit_iv_tobit(sample)
            a0, a1 = fit.alpha0, fit.alpha1
        results = run_test_levels(
            sample, cfg.model, alphas=cfg.alphas, k=cfg.k, q=cfg.q,
            r_draws=cfg.r_draws, grid_points=cfg.grid_points,
            seed=test_seed, fit=fit,
        )
        record.update(
            ok=True,
            alpha0=float(a0),
            alpha1=float(a1),
            rejects={f"{r.alpha:g}": bool(r.reject) for r in results},
            statistics={f"{r.alpha:g}": r.statistic for r in results},
        )
    except TobitcheckError as exc:
        record["error"] = str(exc)
    return record


def _worker(args):
    cfg_dict, rep = args
    cfg = DgpConfig(**cfg_dict)
    return run_replication(cfg, rep)


@dataclass
class StudyReport:
    """Aggregated rejection rates and estimator MSEs, one row per config."""

    rows: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"schema": "tobitcheck/study-report/v1", "configs": self.rows}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2))

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "config", "model", "n", "rho", "error_family", "reps_done",
                "failures", "alpha", "reject_rate", "mse_alpha0", "mse_alpha1",
                "seed",
            ])
            for row in self.rows:
                for alpha, rate in sorted(row["reject_rates"].items(),
                                          key=lambda kv: -float(kv[0])):
                    writer.writerow([
                        row["name"], row["model"], row["n"], row["rho"],
                        row["error_family"], row["reps_done"], row["failures"],
                        alpha, rate, row["mse_alpha0"], row["mse_alpha1"],
                        row["seed"],
                    ])

    def rate(self, config_name: str, alpha: float) -> float:
        for row in self.rows:
            if row["name"] == config_name:
                return row["reject_rates"][f"{alpha:g}"]
        raise KeyError(config_name)


def _aggregate(cfg: DgpConfig, records: list[dict]) -> dict:
    ok = [r for r in records if r.get("ok")]
    failures = [r for r in records if not r.get("ok")]
    if failures:
        log.warning("%s: %d/%d replications failed and were excluded",
                    cfg.name, len(failures), len(records))
    rates = {}
    for a in cfg.alphas:
        key = f"{a:g}"
        rates[key] = (float(np.mean([r["rejects"][key] for r in ok]))
                      if ok else math.nan)
    a0 = np.array([r["alpha0"] for r in ok])
    a1 = np.array([r["alpha1"] for r in ok])
    return {
        "name": cfg.name,
        "model": cfg.model,
        "n": cfg.n,
        "rho": cfg.rho,
        "error_family": cfg.error_family,
        "reps_requested": cfg.reps,
        "reps_done": len(ok),
        "failures": len(failures),
        "failure_messages": [r.get("error", "") for r in failures][:20],
        "reject_rates": rates,
        "mse_alpha0": float(np.mean((a0 - _TRUE_ALPHA0) ** 2)) if ok else math.nan,
        "mse_alpha1": float(np.mean((a1 - _TRUE_ALPHA1) ** 2)) if ok else math.nan,
        "seed": cfg.seed,
    }


def _cache_path(workdir: Path, cfg: DgpConfig) -> Path:
    return workdir / f"{cfg.name}.jsonl"


def run_study(
    configs: Sequence[DgpConfig],
    threads: int = 1,
    workdir=None,
    resume: bool = False,
    progress=None,
) -> StudyReport:
    """Run every config's replications, aggregate, and (optionally) persist.

    With a ``workdir`` each finished replication is appended to a JSONL cache;
    ``resume=True`` skips replications already present there. Results are
    independent of ``threads``.
    """
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise InputError("config names must be unique")
    report = StudyReport()
    wd = Path(workdir) if workdir is not None else None
    if wd is not None:
        wd.mkdir(parents=True, exist_ok=True)
    for cfg in configs:
        done: dict[int, dict] = {}
        cache = _cache_path(wd, cfg) if wd is not None else None
        if cache is not None and resume and cache.exists():
            for line in cache.read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    done[rec["rep"]] = rec
        todo = [r for r in range(cfg.reps) if r not in done]
        if todo:
            cfg_dict = {
                "name": cfg.name, "model": cfg.model, "n": cfg.n,
                "rho": cfg.rho, "reps": cfg.reps, "seed": cfg.seed,
                "error_family": cfg.error_family, "df": cfg.df,
                "k": cfg.k, "q": cfg.q, "alphas": tuple(cfg.alphas),
                "r_draws": cfg.r_draws, "grid_points": cfg.grid_points,
            }
            fh = cache.open("a") if cache is not None else None
            try:
                if threads > 1:
                    with ProcessPoolExecutor(max_workers=threads) as pool:
                        for rec in pool.map(_worker,
                                            [(cfg_dict, r) for r in todo],
                                            chunksize=1):
                            done[rec["rep"]] = rec
                            if fh is not None:
                                fh.write(json.dumps(rec) + "\n")
                                fh.flush()
                            if progress is not None:
                                progress(cfg.name, rec)
                else:
                    for r in todo:
                        rec = run_replication(cfg, r)
                        done[rec["rep"]] = rec
                        if fh is not None:
                            fh.write(json.dumps(rec) + "\n")
                            fh.flush()
                        if progress is not None:
                            progress(cfg.name, rec)
            finally:
                if fh is not None:
                    fh.close()
        records = [done[r] for r in sorted(done)]
        report.rows.append(_aggregate(cfg, records))
    return report


def load_config_file(path, seed_override: Optional[int] = None,
                     reps_override: Optional[int] = None) -> list[DgpConfig]:
    """Parse a line-oriented key=value study file with one [section] per config."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file does not exist: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise InputError(f"{path}: {exc}") from None
    if not parser.sections():
        raise InputError(f"{path}: no [config] sections found")
    known = {"model", "n", "rho", "reps", "seed", "error_family", "df",
             "k", "q", "alphas", "r_draws", "grid_points"}
    configs = []
    for section in parser.sections():
        kwargs: dict = {"name": section}
        for key, raw in parser.items(section):
            if key not in known:
                raise InputError(f"{path} [{section}]: unknown key {key!r}")
            try:
                if key in ("n", "reps", "seed", "k", "q", "r_draws", "grid_points"):
                    kwargs[key] = int(raw)
                elif key in ("rho", "df"):
                    kwargs[key] = float(raw)
                elif key == "alphas":
                    kwargs[key] = tuple(float(tok) for tok in raw.split(","))
                else:
                    kwargs[key] = raw.strip()
            except ValueError:
                raise InputError(
                    f"{path} [{section}]: invalid value {raw!r} for key {key!r}"
                ) from None
        cfg = DgpConfig(**kwargs)
        if seed_override is not None:
            cfg = replace(cfg, seed=seed_override)
        if reps_override is not None:
            cfg = replace(cfg, reps=reps_override)
        configs.append(cfg)
    return configs
