"""Model-implied cell probabilities and synthetic data generation.

A Partition splits the outcome support into the mass point {Y = 0}, half-open
interior intervals, and an upper tail (plus analogous treatment cells for the
instrumented model). The evaluators here return the probability the model
assigns to each cell given the exogenous value, using the scale-normalized
parameterization (unit latent standard deviations); ``estimate`` produces the
normalized parameters and ``Partition.scaled`` rescales the cut points to
match.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from .data import Sample
from .errors import InputError, PartitionError
from .numcore import bivnorm_cdf, std_normal_cdf

if TYPE_CHECKING:  # pragma: no cover
    from .estimate import ClassicTobitFit, IvTobitFit

__all__ = [
    "Cell",
    "Partition",
    "ClassicIndex",
    "IvIndex",
    "Type2Params",
    "build_partition",
    "classic_implied_prob",
    "iv_implied_prob",
    "type2_implied_prob",
    "simulate_from_model",
]


@dataclass(frozen=True)
class Cell:
    """One element of the (Y, D) support grid.

    y_kind: "zero" (mass point), "interval" ((y_lo, y_hi]), "upper"
    ((y_lo, inf)), or "missing" (selection models only).
    d_kind: "all", "lower" ((-inf, d_hi]), "interval" ((d_lo, d_hi]),
    or "upper" ((d_lo, inf)).
    """

    y_kind: str
    y_lo: float = 0.0
    y_hi: float = 0.0
    d_kind: str = "all"
    d_lo: float = -math.inf
    d_hi: float = math.inf

    def __post_init__(self):
        if self.y_kind not in ("zero", "interval", "upper", "missing"):
            raise InputError(f"unknown y_kind {self.y_kind!r}")
        if self.d_kind not in ("all", "lower", "interval", "upper"):
            raise InputError(f"unknown d_kind {self.d_kind!r}")
        if self.y_kind == "interval" and not self.y_lo < self.y_hi:
            raise InputError("interval cell needs y_lo < y_hi")
        if self.d_kind == "interval" and not self.d_lo < self.d_hi:
            raise InputError("interval cell needs d_lo < d_hi")

    def indicator_y(self, y: np.ndarray) -> np.ndarray:
        if self.y_kind == "zero":
            return y == 0.0
        if self.y_kind == "interval":
            return (y > self.y_lo) & (y <= self.y_hi)
        if self.y_kind == "upper":
            return y > self.y_lo
        raise InputError("missing-cells have no indicator on observed data")

    def indicator_d(self, d: np.ndarray) -> np.ndarray:
        if self.d_kind == "all":
            return np.ones(d.shape, dtype=bool)
        if self.d_kind == "lower":
            return d <= self.d_hi
        if self.d_kind == "interval":
            return (d > self.d_lo) & (d <= self.d_hi)
        return d > self.d_lo

    def indicator(self, y: np.ndarray, d: np.ndarray) -> np.ndarray:
        return self.indicator_y(y) & self.indicator_d(d)

    @property
    def label(self) -> str:
        if self.y_kind == "zero":
            ytxt = "y=0"
        elif self.y_kind == "missing":
            ytxt = "y=missing"
        elif self.y_kind == "interval":
            ytxt = f"y in ({self.y_lo:g},{self.y_hi:g}]"
        else:
            ytxt = f"y > {self.y_lo:g}"
        if self.d_kind == "all":
            return ytxt
        if self.d_kind == "lower":
            return f"{ytxt}, d <= {self.d_hi:g}"
        if self.d_kind == "interval":
            return f"{ytxt}, d in ({self.d_lo:g},{self.d_hi:g}]"
        return f"{ytxt}, d > {self.d_lo:g}"


@dataclass(frozen=True)
class Partition:
    """Cut points over the supports of Y and D.

    ``y_cuts`` are strictly increasing positive reals; with m cuts the outcome
    cells are {0}, (0, c_1], ..., (c_{m-1}, c_m], (c_m, inf): m + 2 cells in
    total. ``d_cuts`` (empty for the exogenous model) tile the treatment
    axis the same way with lower/interval/upper cells.
    """

    y_cuts: np.ndarray
    d_cuts: np.ndarray = field(default_factory=lambda: np.array([]))

    def __post_init__(self):
        yc = np.asarray(self.y_cuts, dtype=float)
        dc = np.asarray(self.d_cuts, dtype=float)
        object.__setattr__(self, "y_cuts", yc)
        object.__setattr__(self, "d_cuts", dc)
        if yc.size == 0:
            raise PartitionError("partition needs at least one outcome cut")
        if np.any(yc <= 0.0):
            raise PartitionError("outcome cuts must be strictly positive")
        if np.any(np.diff(yc) <= 0.0) or np.any(np.diff(dc) <= 0.0):
            raise PartitionError("cut points must be strictly increasing")

    def y_cells(self) -> list[Cell]:
        cuts = self.y_cuts
        cells = [Cell("zero")]
        lo = 0.0
        for c in cuts:
            cells.append(Cell("interval", y_lo=lo, y_hi=float(c)))
            lo = float(c)
        cells.append(Cell("upper", y_lo=lo))
        return cells

    def d_cells(self) -> list[Cell]:
        if self.d_cuts.size == 0:
            return []
        cuts = [float(c) for c in self.d_cuts]
        cells = [Cell("upper", d_kind="lower", d_hi=cuts[0], y_lo=0.0)]
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            cells.append(Cell("upper", d_kind="interval", d_lo=lo, d_hi=hi, y_lo=0.0))
        cells.append(Cell("upper", d_kind="upper", d_lo=cuts[-1], y_lo=0.0))
        return cells

    def cells(self) -> list[Cell]:
        """All moment cells: y-cells crossed with d-cells (y-major order)."""
        ycs = self.y_cells()
        if self.d_cuts.size == 0:
            return ycs
        out = []
        for yc in ycs:
            for dc in self.d_cells():
                out.append(Cell(yc.y_kind, yc.y_lo, yc.y_hi,
                                dc.d_kind, dc.d_lo, dc.d_hi))
        return out

    @property
    def n_y_cells(self) -> int:
        return self.y_cuts.size + 2

    @property
    def n_d_cells(self) -> int:
        return 1 if self.d_cuts.size == 0 else self.d_cuts.size + 1

    def scaled(self, y_scale: float = 1.0, d_scale: float = 1.0) -> "Partition":
        """Rescale cut points (used to move cells onto the unit-sigma scale)."""
        return Partition(self.y_cuts * y_scale, self.d_cuts * d_scale)


def _quantile_cuts(values: np.ndarray, levels: np.ndarray, axis: str) -> np.ndarray:
    cuts = np.quantile(values, levels)
    uniq = np.unique(cuts)
    if uniq.size < cuts.size:
        warnings.warn(
            f"duplicate {axis} quantiles collapsed: {cuts.size} cuts -> {uniq.size}",
            stacklevel=3,
        )
    return uniq


def build_partition(
    sample: Sample,
    k: int = 4,
    q: Optional[int] = None,
    min_cell_count: int = 30,
) -> Partition:
    """Equal-count partition: k cells on the positive outcome range (cuts at
    the j/k quantiles of {y : y > 0}) plus, when q is given, q + 1 treatment
    cells (cuts at the j/(q+1) quantiles of d).

    Each marginal cell must contain at least ``min_cell_count`` observations.
    """
    if k < 1:
        raise PartitionError("k must be at least 1")
    pos = sample.y[sample.y > 0.0]
    if pos.size < k * min_cell_count:
        raise PartitionError(
            f"need at least {k * min_cell_count} positive outcomes for k={k}, "
            f"have {pos.size}"
        )
    if k == 1:
        y_cuts = _quantile_cuts(pos, np.array([0.5]), "outcome")
    else:
        y_cuts = _quantile_cuts(pos, np.arange(1, k) / k, "outcome")
    d_cuts = np.array([])
    if q is not None and q >= 1:
        d_cuts = _quantile_cuts(sample.d, np.arange(1, q + 1) / (q + 1), "treatment")
    part = Partition(y_cuts, d_cuts)

    for cell in part.y_cells():
        count = int(np.count_nonzero(cell.indicator_y(sample.y)))
        if count < min_cell_count:
            raise PartitionError(f"outcome cell {cell.label!r} has {count} obs (< {min_cell_count})")
    if d_cuts.size:
        for cell in part.d_cells():
            count = int(np.count_nonzero(cell.indicator_d(sample.d)))
            if count < min_cell_count:
                raise PartitionError(
                    f"treatment cell has {count} obs (< {min_cell_count})"
                )
    return part


@dataclass(frozen=True)
class ClassicIndex:
    """Normalized (unit latent sd) index parameters for the exogenous model."""

    alpha0: float
    alpha1: float
    alpha2: tuple = ()

    def index(self, d, x=None) -> np.ndarray:
        idx = self.alpha0 + self.alpha1 * np.asarray(d, dtype=float)
        if len(self.alpha2):
            if x is None:
                raise InputError("covariate coefficients present but no x supplied")
            idx = idx + np.asarray(x, dtype=float) @ np.asarray(self.alpha2)
        return idx


@dataclass(frozen=True)
class IvIndex:
    """Normalized reduced-form parameters: unit-variance (W, V), correlation rho."""

    beta0: float
    beta1: float
    gamma0: float
    gamma1: float
    rho: float
    beta2: tuple = ()
    gamma2: tuple = ()

    def y_index(self, z, x=None) -> np.ndarray:
        idx = self.beta0 + self.beta1 * np.asarray(z, dtype=float)
        if len(self.beta2):
            if x is None:
                raise InputError("covariate coefficients present but no x supplied")
            idx = idx + np.asarray(x, dtype=float) @ np.asarray(self.beta2)
        return idx

    def d_index(self, z, x=None) -> np.ndarray:
        idx = self.gamma0 + self.gamma1 * np.asarray(z, dtype=float)
        if len(self.gamma2):
            if x is None:
                raise InputError("covariate coefficients present but no x supplied")
            idx = idx + np.asarray(x, dtype=float) @ np.asarray(self.gamma2)
        return idx


@dataclass(frozen=True)
class Type2Params:
    """Selection-model parameters; no scale normalization is imposed."""

    alpha0: float
    alpha1: float
    gamma0: float
    gamma1: float
    sigma_u: float
    sigma_v: float
    rho_uv: float


def classic_implied_prob(index: ClassicIndex, d, cell: Cell, x=None):
    """Model probability of ``cell`` given D=d under the normalized classic model."""
    idx = index.index(d, x)
    if cell.y_kind == "zero":
        return std_normal_cdf(-idx)
    if cell.y_kind == "interval":
        return std_normal_cdf(cell.y_hi - idx) - std_normal_cdf(cell.y_lo - idx)
    if cell.y_kind == "upper":
        return 1.0 - std_normal_cdf(cell.y_lo - idx)
    raise InputError(f"classic model has no {cell.y_kind!r} cells")


def iv_implied_prob(index: IvIndex, z, x, cell: Cell):
    """Model probability of ``cell`` given Z=z under the normalized IV model.

    All nine (outcome range x treatment range) cases reduce to an
    inclusion-exclusion over the joint normal CDF; the "all" treatment range
    falls back to the marginal outcome probability.
    """
    wy = index.y_index(z, x)
    wd = index.d_index(z, x)
    rho = index.rho

    def fw(c):
        return std_normal_cdf(c - wy)

    def fv(dv):
        return std_normal_cdf(dv - wd)

    def f2(c, dv):
        return bivnorm_cdf(c - wy, dv - wd, rho)

    yk, dk = cell.y_kind, cell.d_kind
    if yk == "zero":
        if dk == "all":
            return fw(0.0)
        if dk == "lower":
            return f2(0.0, cell.d_hi)
        if dk == "interval":
            return f2(0.0, cell.d_hi) - f2(0.0, cell.d_lo)
        return fw(0.0) - f2(0.0, cell.d_lo)
    if yk == "interval":
        lo, hi = cell.y_lo, cell.y_hi
        if dk == "all":
            return fw(hi) - fw(lo)
        if dk == "lower":
            return f2(hi, cell.d_hi) - f2(lo, cell.d_hi)
        if dk == "interval":
            return (f2(hi, cell.d_hi) - f2(lo, cell.d_hi)
                    - f2(hi, cell.d_lo) + f2(lo, cell.d_lo))
        return fw(hi) - fw(lo) - f2(hi, cell.d_lo) + f2(lo, cell.d_lo)
    if yk == "upper":
        lo = cell.y_lo
        if dk == "all":
            return 1.0 - fw(lo)
        if dk == "lower":
            return fv(cell.d_hi) - f2(lo, cell.d_hi)
        if dk == "interval":
            return (fv(cell.d_hi) - fv(cell.d_lo)
                    - f2(lo, cell.d_hi) + f2(lo, cell.d_lo))
        return 1.0 - fw(lo) - fv(cell.d_lo) + f2(lo, cell.d_lo)
    raise InputError(f"IV model has no {cell.y_kind!r} cells")


def type2_implied_prob(params: Type2Params, d, z, cell: Cell):
    """Selection-model probability of ``cell`` given D=d, Z=z.

    The cell's outcome range must be "missing", "interval", or "upper";
    interval cells may have an infinite lower edge.
    """
    d = np.asarray(d, dtype=float)
    z = np.asarray(z, dtype=float)
    sv = (-params.gamma0 - params.gamma1 * z) / params.sigma_v
    if cell.y_kind == "missing":
        return std_normal_cdf(sv)
    if cell.y_kind == "zero":
        raise InputError("selection model has no mass point; use 'missing' cells")

    def su(c):
        return (c - params.alpha0 - params.alpha1 * d) / params.sigma_u

    if cell.y_kind == "interval":
        hi, lo = su(cell.y_hi), su(cell.y_lo)
        return (std_normal_cdf(hi) - std_normal_cdf(lo)
                - bivnorm_cdf(hi, sv, params.rho_uv)
                + bivnorm_cdf(lo, sv, params.rho_uv))
    # upper tail: P(U >= lo, V >= -g0-g1 z)
    lo = su(cell.y_lo)
    return (1.0 - std_normal_cdf(lo) - std_normal_cdf(sv)
            + bivnorm_cdf(lo, sv, params.rho_uv))


def simulate_from_model(fit, exogenous, seed, x=None) -> Sample:
    """Draw a synthetic Sample from a fitted null model.

    The classic model draws U ~ N(0, 1) and sets Y = max(0, a0 + a1 d + s U);
    the IV model draws V ~ N(0, 1), W = rho V + sqrt(1 - rho^2) e, then builds
    D and Y from the reduced form. Deterministic given the seed.
    """
    exo = np.asarray(exogenous, dtype=float)
    if exo.ndim != 1 or exo.size == 0:
        raise InputError("exogenous must be a nonempty vector")
    rng = np.random.default_rng(seed)
    if hasattr(fit, "gamma1"):  # IV fit
        z = exo
        v = rng.standard_normal(exo.size)
        w = fit.rho * v + math.sqrt(1.0 - fit.rho**2) * rng.standard_normal(exo.size)
        mu_d = fit.gamma0 + fit.gamma1 * z
        mu_y = fit.beta0 + fit.beta1 * z
        if x is not None:
            x = np.asarray(x, dtype=float)
            mu_d = mu_d + x @ np.asarray(fit.gamma2)
            mu_y = mu_y + x @ np.asarray(fit.beta2)
        d = mu_d + fit.sigma_v * v
        y_star = mu_y + fit.sigma_w * w
        return Sample(y=np.maximum(0.0, y_star), d=d, z=z, x=x)
    u = rng.standard_normal(exo.size)
    mu = fit.alpha0 + fit.alpha1 * exo
    if x is not None:
        x = np.asarray(x, dtype=float)
        mu = mu + x @ np.asarray(fit.alpha2)
    y_star = mu + fit.sigma * u
    return Sample(y=np.maximum(0.0, y_star), d=exo, x=x)
