"""Gaussian numerical kernels.

Univariate CDF/quantile/inverse-Mills primitives plus a reference-accuracy
bivariate normal CDF. Everything here is pure and reentrant; scalar inputs
give scalar outputs, arrays broadcast elementwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InputError

__all__ = [
    "Correlation",
    "std_normal_cdf",
    "std_normal_pdf",
    "std_normal_quantile",
    "inverse_mills",
    "bivnorm_cdf",
    "bivnorm_pdf",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class Correlation:
    """Correlation coefficient on the open interval (-1, 1).

    Callers that need the rho = +/-1 limits must use the explicit limit
    formulas min(Phi(x), Phi(y)) and max(0, Phi(x) + Phi(y) - 1) instead;
    keeping the interval open keeps the quadrature branch well posed.
    """

    rho: float

    def __post_init__(self):
        r = float(self.rho)
        if math.isnan(r) or not -1.0 < r < 1.0:
            raise InputError(f"correlation must lie strictly inside (-1, 1), got {self.rho!r}")
        object.__setattr__(self, "rho", r)

    def __float__(self) -> float:
        return self.rho


def _as_rho(rho) -> float:
    if isinstance(rho, Correlation):
        return rho.rho
    return Correlation(float(rho)).rho


def _asarray_checked(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.isnan(arr).any():
        raise InputError(f"{name} must not contain NaN")
    return arr


def _maybe_scalar(out: np.ndarray, scalar: bool):
    return float(out) if scalar else out


def std_normal_cdf(x):
    """Standard normal CDF, accurate to full double precision.

    +/-inf map to 1/0; NaN raises.
    """
    arr = _asarray_checked(x, "x")
    return _maybe_scalar(special.ndtr(arr), arr.ndim == 0)


def std_normal_pdf(x):
    """Standard normal density."""
    arr = _asarray_checked(x, "x")
    return _maybe_scalar(np.exp(-0.5 * arr * arr) / _SQRT_2PI, arr.ndim == 0)


def std_normal_quantile(p):
    """Inverse of the standard normal CDF on (0, 1)."""
    arr = _asarray_checked(p, "p")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise InputError("quantile argument must lie strictly inside (0, 1)")
    return _maybe_scalar(special.ndtri(arr), arr.ndim == 0)


def _mills_tail(x: np.ndarray, depth: int = 80) -> np.ndarray:
    # Continued fraction for phi(x)/Phi(-x), x > 0, evaluated bottom-up:
    # result = x + 1/(x + 2/(x + 3/(...))). Converges fast for x > 3.
    d = x.astype(float).copy()
    for k in range(depth, 0, -1):
        d = x + k / d
    return d


def inverse_mills(t):
    """Inverse Mills ratio phi(t) / Phi(t).

    Strictly positive and strictly decreasing. The deep-left tail (t < -10)
    uses a continued-fraction expansion so Phi(t) underflow never produces
    0/0 or overflow.
    """
    arr = _asarray_checked(t, "t")
    if not np.all(np.isfinite(arr)):
        raise InputError("t must be finite")
    arr1 = np.atleast_1d(arr)
    out = np.empty_like(arr1)
    deep = arr1 < -10.0
    if np.any(~deep):
        a = arr1[~deep]
        out[~deep] = np.exp(-0.5 * a * a) / _SQRT_2PI / special.ndtr(a)
    if np.any(deep):
        out[deep] = _mills_tail(-arr1[deep])
    return _maybe_scalar(out.reshape(arr.shape), arr.ndim == 0)


def bivnorm_pdf(x, y, rho):
    """Standard bivariate normal density with correlation rho."""
    r = _as_rho(rho)
    ax = _asarray_checked(x, "x")
    ay = _asarray_checked(y, "y")
    if not (np.all(np.isfinite(ax)) and np.all(np.isfinite(ay))):
        raise InputError("x and y must be finite")
    ax, ay = np.broadcast_arrays(ax, ay)
    omr2 = 1.0 - r * r
    q = (ax * ax - 2.0 * r * ax * ay + ay * ay) / omr2
    out = np.exp(-0.5 * q) / (2.0 * math.pi * math.sqrt(omr2))
    return _maybe_scalar(out, out.ndim == 0)


# Gauss-Legendre abscissae (positive half) and weights for the three accuracy
# tiers of the hybrid algorithm: 6, 12 and 20 point rules.
_GL_X = {
    6: np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
    12: np.array([
        0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
        0.5873179542866171, 0.3678314989981802, 0.1252334085114692,
    ]),
    20: np.array([
        0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
        0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
        0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
        0.07652652113349733,
    ]),
}
_GL_W = {
    6: np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
    12: np.array([
        0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
        0.2031674267230659, 0.2334925365383547, 0.2491470458134029,
    ]),
    20: np.array([
        0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
        0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
        0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
        0.1527533871307259,
    ]),
}


def _gl_rule(r: float):
    if abs(r) < 0.3:
        n = 6
    elif abs(r) < 0.75:
        n = 12
    else:
        n = 20
    x = _GL_X[n]
    return np.concatenate([1.0 - x, 1.0 + x]), np.concatenate([_GL_W[n], _GL_W[n]])


def _bvn_upper(dh: np.ndarray, dk: np.ndarray, r: float) -> np.ndarray:
    """P(X > dh, Y > dk) for standard bivariate normal, finite arguments.

    Gauss-Legendre quadrature over the tetrachoric integral, switching to the
    Drezner-Wesolowsky variable change for |r| > 0.925. Absolute error is
    below 5e-16 across the whole parameter range.
    """
    if r == 0.0:
        return special.ndtr(-dh) * special.ndtr(-dk)

    xg, wg = _gl_rule(r)
    h = dh.astype(float).copy()
    k = dk.astype(float).copy()
    hk = h * k
    tp = 2.0 * math.pi

    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = math.asin(r) / 2.0
        sn = np.sin(asr * xg)
        # (n_pts, n_nodes) integrand, reduced against the GL weights
        e = np.exp((np.multiply.outer(hk, sn) - hs[:, None]) / (1.0 - sn * sn))
        bvn = e @ wg
        return np.clip(bvn * asr / tp + special.ndtr(-h) * special.ndtr(-k), 0.0, 1.0)

    if r < 0.0:
        k = -k
        hk = -hk
    a_s = (1.0 - r) * (1.0 + r)
    a = math.sqrt(a_s)
    bs = (h - k) ** 2
    c = (4.0 - hk) / 8.0
    d = (12.0 - hk) / 16.0
    asr0 = -(bs / a_s + hk) / 2.0
    bvn = np.where(
        asr0 > -100.0,
        a * np.exp(asr0) * (1.0 - c * (bs - a_s) * (1.0 - d * bs / 5.0) / 3.0
                            + c * d * a_s * a_s / 5.0),
        0.0,
    )
    m = -hk < 100.0
    if np.any(m):
        b = np.sqrt(bs[m])
        sp = _SQRT_2PI * special.ndtr(-b / a)
        bvn[m] -= np.exp(-hk[m] / 2.0) * sp * b * (
            1.0 - c[m] * bs[m] * (1.0 - d[m] * bs[m] / 5.0) / 3.0
        )
    a2 = a / 2.0
    xs = (a2 * xg) ** 2                       # (n_nodes,)
    rs = np.sqrt(1.0 - xs)
    asr_n = -(bs[:, None] / xs[None, :] + hk[:, None]) / 2.0
    sp_n = 1.0 + c[:, None] * xs[None, :] * (1.0 + d[:, None] * xs[None, :])
    ep = np.exp(-hk[:, None] * (1.0 - rs[None, :]) / (2.0 * (1.0 + rs[None, :]))) / rs[None, :]
    # asr_n <= 0 always holds here ((h-k)^2 >= 4|hk| when hk < 0), so exp is safe
    term = np.where(asr_n > -100.0, np.exp(asr_n) * (ep - sp_n), 0.0)
    bvn = bvn + a2 * (term @ wg)
    bvn = -bvn / tp

    if r > 0.0:
        bvn = bvn + special.ndtr(-np.maximum(h, k))
    else:
        bvn = -bvn
        swap = k > h
        if np.any(swap):
            ks, hs_ = k[swap], h[swap]
            extra = np.where(ks < 0.0,
                             special.ndtr(ks) - special.ndtr(hs_),
                             special.ndtr(-hs_) - special.ndtr(-ks))
            bvn[swap] += extra
    return np.clip(bvn, 0.0, 1.0)


def bivnorm_cdf(x, y, rho):
    """P(X <= x, Y <= y) for the standard bivariate normal with correlation rho.

    Arguments may be +/-inf and broadcast elementwise; rho is scalar (or a
    Correlation). Absolute accuracy is at the 1e-15 level, comfortably inside
    the 1e-14 contract.
    """
    r = _as_rho(rho)
    ax = _asarray_checked(x, "x")
    ay = _asarray_checked(y, "y")
    ax, ay = np.broadcast_arrays(ax, ay)
    scalar = ax.ndim == 0
    ax = np.atleast_1d(ax).astype(float)
    ay = np.atleast_1d(ay).astype(float)

    out = np.empty(ax.shape, dtype=float)
    neg_inf = (ax == -np.inf) | (ay == -np.inf)
    x_inf = (ax == np.inf) & ~neg_inf
    y_inf = (ay == np.inf) & ~neg_inf & ~x_inf
    core = ~(neg_inf | x_inf | y_inf)

    out[neg_inf] = 0.0
    out[x_inf] = special.ndtr(ay[x_inf])       # covers (inf, inf) too
    out[y_inf] = special.ndtr(ax[y_inf])
    if np.any(core):
        out[core] = _bvn_upper(-ax[core], -ay[core], r)
    return _maybe_scalar(out.reshape(() if scalar else out.shape), scalar)
