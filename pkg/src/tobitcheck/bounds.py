"""Partial identification of the treatment slope under monotone selection.

When the censored-normal model is rejected, a one-sided bound on the slope
still follows from a linear latent index plus monotonicity of the latent
selection term E(U | D = d, Y > 0) in d. With a decreasing selection term the
slope exceeds every difference quotient of E(Y | D, Y > 0), so the tightest
lower bound is the maximum over evaluation points; an increasing term gives
the mirrored upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Sample
from .errors import BandwidthError, InputError

__all__ = [
    "MtsBound",
    "binned_levels",
    "mts_bound_discrete",
    "mts_bound_continuous",
    "bound_confidence",
]

_DIRECTIONS = ("decreasing", "increasing")


@dataclass(frozen=True)
class MtsBound:
    """One-sided bound on the treatment slope under monotone selection."""

    direction: str                   # "decreasing" or "increasing" selection
    lower_bound: Optional[float]
    upper_bound: Optional[float]
    evaluation: tuple                # per-point dicts
    method: str                      # "discrete" or "continuous"
    ci_limit: Optional[float] = None
    boot_reps: int = 0
    seed: Optional[int] = None

    @property
    def bound(self) -> float:
        return self.lower_bound if self.lower_bound is not None else self.upper_bound

    def to_dict(self) -> dict:
        return {
            "schema": "tobitcheck/mts-bound/v1",
            "direction": self.direction,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "method": self.method,
            "ci_limit": self.ci_limit,
            "boot_reps": self.boot_reps,
            "seed": self.seed,
            "evaluation": list(self.evaluation),
        }


def _check_direction(direction: str) -> None:
    if direction not in _DIRECTIONS:
        raise InputError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")


def binned_levels(sample: Sample, n_bins: int = 10, min_count: int = 30):
    """Quantile-binned pseudo-levels of a continuous treatment.

    Returns (levels, means, counts) where levels are within-bin means of D and
    means are the positive-outcome conditional means, for use as the pair
    anchors of the discrete bound.
    """
    pos = sample.y > 0.0
    if not pos.any():
        raise InputError("no positive outcomes")
    d, y = sample.d[pos], sample.y[pos]
    edges = np.unique(np.quantile(d, np.arange(1, n_bins) / n_bins))
    labels = np.searchsorted(edges, d, side="left")
    levels, means, counts = [], [], []
    for b in np.unique(labels):
        m = labels == b
        if m.sum() < min_count:
            raise InputError(f"bin {b} has {int(m.sum())} positive outcomes (< {min_count})")
        levels.append(float(d[m].mean()))
        means.append(float(y[m].mean()))
        counts.append(int(m.sum()))
    return np.asarray(levels), np.asarray(means), np.asarray(counts)


def _conditional_mean_at(sample: Sample, level: float, atol: Optional[float]):
    pos = sample.y > 0.0
    if atol is None:
        m = pos & (sample.d == level)
    else:
        m = pos & (np.abs(sample.d - level) <= atol)
    if m.sum() < 1:
        raise InputError(f"no positive outcomes at treatment level {level:g}")
    return float(sample.y[m].mean()), int(m.sum())


def mts_bound_discrete(
    sample: Sample,
    pairs: Sequence[tuple[float, float]],
    direction: str = "decreasing",
    atol: Optional[float] = None,
    min_count: int = 30,
) -> MtsBound:
    """Difference-quotient bound over (d, d*) pairs with d > d*.

    Each quotient (E(Y|d*, Y>0) - E(Y|d, Y>0)) / (d* - d) bounds the slope
    from below under decreasing selection; the bound is their maximum.
    Increasing selection reverses the inequality, giving the minimum as an
    upper bound.
    """
    _check_direction(direction)
    if not pairs:
        raise InputError("need at least one (d, d*) pair")
    rows, quotients = [], []
    for d_hi, d_lo in pairs:
        if not d_hi > d_lo:
            raise InputError(f"pair ({d_hi}, {d_lo}) needs d > d*")
        m_hi, n_hi = _conditional_mean_at(sample, d_hi, atol)
        m_lo, n_lo = _conditional_mean_at(sample, d_lo, atol)
        if min(n_hi, n_lo) < min_count:
            raise InputError(
                f"pair ({d_hi:g}, {d_lo:g}) has a cell with fewer than "
                f"{min_count} positive outcomes"
            )
        quot = (m_lo - m_hi) / (d_lo - d_hi)
        rows.append({"d": d_hi, "d_star": d_lo, "mean_d": m_hi, "mean_d_star": m_lo,
                     "n_d": n_hi, "n_d_star": n_lo, "quotient": quot})
        quotients.append(quot)
    quotients = np.asarray(quotients)
    if direction == "decreasing":
        return MtsBound(direction, float(quotients.max()), None, tuple(rows), "discrete")
    return MtsBound(direction, None, float(quotients.min()), tuple(rows), "discrete")


def _local_poly_deriv(d: np.ndarray, y: np.ndarray, point: float, h: float,
                      degree: int = 3):
    """Derivative of E(y|d) at ``point`` from a local polynomial fit.

    Fitting one degree above the target (cubic for a first derivative from a
    local quadratic) is the robust bias-corrected estimate with matched
    bandwidths; the standard error uses the equivalent-kernel row with
    heteroskedastic residuals.
    """
    t = d - point
    kern = np.exp(-0.5 * (t / h) ** 2)
    cols = [kern * t**j for j in range(degree + 1)]
    xw = np.vstack(cols)                       # (degree+1, n) rows are k * t^j
    gram = xw @ np.vstack([t**j for j in range(degree + 1)]).T
    if not np.all(np.isfinite(gram)):
        raise BandwidthError(f"no effective data near d = {point:g}")
    try:
        ginv = np.linalg.inv(gram)
    except np.linalg.LinAlgError:
        raise BandwidthError(f"no effective data near d = {point:g}") from None
    lrow = ginv[1] @ xw                        # weights for the slope coefficient
    est = float(lrow @ y)
    resid = y - np.vstack([t**j for j in range(degree + 1)]).T @ (ginv @ (xw @ y))
    se = float(np.sqrt(np.sum((lrow * resid) ** 2)))
    return est, se


def _deriv_bandwidth(d: np.ndarray) -> float:
    sd = float(np.std(d))
    iqr = float(np.subtract(*np.quantile(d, [0.75, 0.25]))) / 1.349
    scale = min(sd, iqr) if iqr > 0 else sd
    return 2.0 * scale * d.size ** (-1.0 / 7.0)


def _partial_out(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    design = np.column_stack([np.ones(y.size), x])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return y - design @ coef + y.mean()


def mts_bound_continuous(
    sample: Sample,
    grid: Optional[np.ndarray] = None,
    direction: str = "decreasing",
    covariates: bool = False,
    bandwidth: Optional[float] = None,
    grid_size: int = 9,
    min_positive: int = 500,
) -> MtsBound:
    """Derivative-based bound for continuous treatments.

    Local polynomial derivative estimates of E(Y | D = d, Y > 0) on a grid
    inside the 5th-95th percentile band of D; the bound is the max (or min)
    over the grid. With ``covariates`` the outcome is linearly partialed out
    on X within the positive subsample first.
    """
    _check_direction(direction)
    pos = sample.y > 0.0
    if pos.sum() < min_positive:
        raise InputError(
            f"need at least {min_positive} positive outcomes, have {int(pos.sum())}"
        )
    d = sample.d[pos]
    y = sample.y[pos]
    if covariates:
        if sample.x is None:
            raise InputError("covariates requested but the sample has no x columns")
        y = _partial_out(y, sample.x[pos])
    lo, hi = np.quantile(d, [0.05, 0.95])
    if grid is None:
        grid = np.linspace(lo, hi, grid_size)
    else:
        grid = np.asarray(grid, dtype=float)
        if grid.min() < lo or grid.max() > hi:
            raise InputError(
                f"grid must stay inside the 5th-95th percentile band [{lo:g}, {hi:g}]"
            )
    h = bandwidth if bandwidth is not None else _deriv_bandwidth(d)
    rows, derivs = [], []
    for g in grid:
        est, se = _local_poly_deriv(d, y, float(g), h)
        rows.append({"d": float(g), "derivative": est, "se": se})
        derivs.append(est)
    derivs = np.asarray(derivs)
    if direction == "decreasing":
        return MtsBound(direction, float(derivs.max()), None, tuple(rows), "continuous")
    return MtsBound(direction, None, float(derivs.min()), tuple(rows), "continuous")


def bound_confidence(
    sample: Sample,
    method: str = "continuous",
    direction: str = "decreasing",
    boot_reps: int = 200,
    alpha: float = 0.05,
    seed: int = 20221201,
    **kwargs,
) -> MtsBound:
    """Nonparametric bootstrap one-sided confidence limit for the bound.

    For a lower bound the limit is the alpha quantile of the bootstrapped
    bounds, never above the point estimate, which is conservative for the
    underlying slope.
    """
    if boot_reps < 200:
        raise InputError("need at least 200 bootstrap replications")
    if method == "continuous":
        estimator = lambda s: mts_bound_continuous(s, direction=direction, **kwargs)
    elif method == "discrete":
        if "pairs" not in kwargs:
            raise InputError("discrete bound confidence needs pairs=...")
        estimator = lambda s: mts_bound_discrete(s, direction=direction, **kwargs)
    else:
        raise InputError(f"unknown method {method!r}")
    point = estimator(sample)
    rng = np.random.Generator(np.random.Philox(seed=np.random.SeedSequence([seed])))
    stats = []
    for _ in range(boot_reps):
        idx = rng.integers(0, sample.n, sample.n)
        boot = Sample(y=sample.y[idx], d=sample.d[idx],
                      z=None if sample.z is None else sample.z[idx],
                      x=None if sample.x is None else sample.x[idx],
                      x_names=sample.x_names)
        try:
            stats.append(estimator(boot).bound)
        except InputError:
            continue
    if len(stats) < boot_reps // 2:
        raise InputError("bootstrap degenerated: most replications failed")
    stats = np.asarray(stats)
    if np.allclose(stats, stats[0]):
        raise InputError("bootstrap distribution is degenerate (constant)")
    if direction == "decreasing":
        limit = min(float(np.quantile(stats, alpha)), point.bound)
        return MtsBound(direction, point.lower_bound, None, point.evaluation,
                        point.method, ci_limit=limit, boot_reps=boot_reps, seed=seed)
    limit = max(float(np.quantile(stats, 1.0 - alpha)), point.bound)
    return MtsBound(direction, None, point.upper_bound, point.evaluation,
                    point.method, ci_limit=limit, boot_reps=boot_reps, seed=seed)
