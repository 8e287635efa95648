"""Maximum-likelihood fits for the censored outcome models, plus the
closed-form moment-based identification procedures used as cross-checks.

Both likelihoods are maximized by quasi-Newton iterations with analytic
gradients on an unconstrained parameterization (log scales, atanh
correlation); standard errors come from the inverse observed information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize, special

from .data import Sample
from .equalities import ClassicIndex, IvIndex
from .errors import ConvergenceError, InputError, SingularSystemError
from .numcore import inverse_mills

__all__ = [
    "ClassicTobitFit",
    "IvTobitFit",
    "fit_classic_tobit",
    "fit_iv_tobit",
    "moment_identify_classic",
    "moment_identify_iv_firststage",
    "recover_sigma_system",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ClassicTobitFit:
    """Censored-normal MLE: Y = max(0, alpha0 + alpha1 D + alpha2'X + sigma U)."""

    alpha0: float
    alpha1: float
    sigma: float
    alpha2: np.ndarray
    vcov: np.ndarray            # order: alpha0, alpha1, *alpha2, sigma
    loglik: float
    converged: bool
    n_obs: int
    param_names: tuple[str, ...]
    # optimizer coordinates (coefs, log sigma) and their covariance; carried
    # for the plug-in correction of the moment test
    theta_internal: np.ndarray = None
    vcov_internal: np.ndarray = None

    def normalized(self) -> ClassicIndex:
        return ClassicIndex(
            self.alpha0 / self.sigma,
            self.alpha1 / self.sigma,
            tuple(np.asarray(self.alpha2) / self.sigma),
        )

    @property
    def se(self) -> dict[str, float]:
        return dict(zip(self.param_names, np.sqrt(np.diag(self.vcov))))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([[self.alpha0, self.alpha1], self.alpha2, [self.sigma]])


@dataclass(frozen=True)
class IvTobitFit:
    """Joint MLE of the reduced-form censored system.

    Y = max(0, beta0 + beta1 Z + beta2'X + sigma_w W),
    D = gamma0 + gamma1 Z + gamma2'X + sigma_v V,
    (W, V) standard bivariate normal with correlation rho. Structural
    coefficients are recovered through alpha1 = beta1/gamma1.
    """

    beta0: float
    beta1: float
    gamma0: float
    gamma1: float
    rho: float
    sigma_w: float
    sigma_v: float
    alpha0: float
    alpha1: float
    beta2: np.ndarray
    gamma2: np.ndarray
    alpha2: np.ndarray
    vcov: np.ndarray            # order: beta..., gamma..., sigma_w, sigma_v, rho
    loglik: float
    converged: bool
    n_obs: int
    param_names: tuple[str, ...]
    rho_boundary: bool = False
    weak_first_stage: bool = False
    theta_internal: np.ndarray = None
    vcov_internal: np.ndarray = None

    def normalized(self) -> IvIndex:
        return IvIndex(
            beta0=self.beta0 / self.sigma_w,
            beta1=self.beta1 / self.sigma_w,
            gamma0=self.gamma0 / self.sigma_v,
            gamma1=self.gamma1 / self.sigma_v,
            rho=self.rho,
            beta2=tuple(np.asarray(self.beta2) / self.sigma_w),
            gamma2=tuple(np.asarray(self.gamma2) / self.sigma_v),
        )

    @property
    def se(self) -> dict[str, float]:
        return dict(zip(self.param_names, np.sqrt(np.diag(self.vcov))))

    def structural_se(self) -> dict[str, float]:
        """Delta-method standard errors for the recovered structural slopes."""
        names = list(self.param_names)
        i_b0, i_b1 = names.index("beta0"), names.index("beta1")
        i_g0, i_g1 = names.index("gamma0"), names.index("gamma1")
        p = len(names)
        g1, b1, g0 = self.gamma1, self.beta1, self.gamma0
        j1 = np.zeros(p)
        j1[i_b1] = 1.0 / g1
        j1[i_g1] = -b1 / g1**2
        j0 = np.zeros(p)
        j0[i_b0] = 1.0
        j0[i_b1] = -g0 / g1
        j0[i_g0] = -self.alpha1
        j0[i_g1] = b1 * g0 / g1**2
        out = {
            "alpha0": float(np.sqrt(j0 @ self.vcov @ j0)),
            "alpha1": float(np.sqrt(j1 @ self.vcov @ j1)),
        }
        for k in range(len(self.beta2)):
            jk = np.zeros(p)
            jk[names.index(f"beta_x{k}")] = 1.0
            jk[i_b1] = -self.gamma2[k] / g1
            jk[names.index(f"gamma_x{k}")] = -self.alpha1
            jk[i_g1] = b1 * self.gamma2[k] / g1**2
            out[f"alpha_x{k}"] = float(np.sqrt(jk @ self.vcov @ jk))
        return out


def _design(sample: Sample, exog: np.ndarray, include_covariates: bool, what: str):
    cols = [np.ones(sample.n), exog]
    names = ["const", what]
    if include_covariates:
        if sample.x is None:
            raise InputError("include_covariates requested but the sample has no x columns")
        for j, nm in enumerate(sample.x_names):
            cols.append(sample.x[:, j])
            names.append(nm)
    a = np.column_stack(cols)
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise InputError(f"rank-deficient design matrix for the {what} equation")
    return a, names


def _fd_hessian(grad, theta: np.ndarray) -> np.ndarray:
    p = theta.size
    h = 1e-5 * np.maximum(1.0, np.abs(theta))
    hess = np.zeros((p, p))
    for i in range(p):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h[i]
        tm[i] -= h[i]
        hess[:, i] = (grad(tp) - grad(tm)) / (2.0 * h[i])
    return 0.5 * (hess + hess.T)


def _invert_information(hess: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"observed information is singular: {exc}") from None
    return 0.5 * (cov + cov.T)


def _maximize(negll_grad, theta0: np.ndarray, gtol: float, maxiter: int, what: str):
    """Quasi-Newton minimization with analytic gradient.

    The objective is on the mean log-likelihood scale, so the gradient
    tolerance is per observation. A Newton polish on the finite-difference
    Hessian tightens the optimum after BFGS, which tends to stop early on
    flat large-sample objectives.
    """
    res = optimize.minimize(
        negll_grad, theta0, jac=True, method="BFGS",
        options={"gtol": gtol, "maxiter": maxiter},
    )
    theta = res.x
    f_cur, g_cur = negll_grad(theta)
    for _ in range(25):
        if float(np.max(np.abs(g_cur))) < gtol:
            return theta, True
        hess = _fd_hessian(lambda t: negll_grad(t)[1], theta)
        try:
            step = np.linalg.solve(hess, g_cur)
        except np.linalg.LinAlgError:
            break
        # backtrack to keep the polish monotone
        scale = 1.0
        for _ in range(30):
            f_new, g_new = negll_grad(theta - scale * step)
            if f_new <= f_cur + 1e-12 * max(1.0, abs(f_cur)):
                theta = theta - scale * step
                f_cur, g_cur = f_new, g_new
                break
            scale /= 2.0
        else:
            break
    gnorm = float(np.max(np.abs(g_cur)))
    if gnorm < gtol:
        return theta, True
    raise ConvergenceError(
        f"{what}: gradient norm {gnorm:.2e} above {gtol:g} after Newton polish"
    )


def fit_classic_tobit(
    sample: Sample,
    include_covariates: bool = False,
    gtol: float = 1e-6,
    maxiter: int = 500,
) -> ClassicTobitFit:
    """Fit the exogenous censored-normal model by maximum likelihood."""
    sample.require_censoring_interior("fit_classic_tobit")
    a, names = _design(sample, sample.d, include_covariates, "d")
    y = sample.y
    cens = y == 0.0
    p = a.shape[1]

    n = sample.n

    def negll_grad(theta):
        coef, ls = theta[:p], theta[p]
        s = math.exp(ls)
        mu = a @ coef
        r = (y - mu) / s
        e0 = -mu / s
        ll = np.where(
            cens,
            special.log_ndtr(e0),
            -0.5 * r * r - 0.5 * _LOG_2PI - ls,
        ).sum()
        g_mu = np.where(cens, -inverse_mills(e0) / s, r / s)
        g_ls_terms = np.where(cens, -inverse_mills(e0) * e0, r * r - 1.0)
        grad = np.concatenate([a.T @ g_mu, [g_ls_terms.sum()]])
        return -ll / n, -grad / n

    # start: OLS on the uncensored part, log of the residual sd
    pos = ~cens
    coef0, *_ = np.linalg.lstsq(a[pos], y[pos], rcond=None)
    resid = y[pos] - a[pos] @ coef0
    theta0 = np.concatenate([coef0, [math.log(max(np.std(resid), 1e-3))]])

    theta, converged = _maximize(negll_grad, theta0, gtol, maxiter, "classic Tobit MLE")
    hess = _fd_hessian(lambda t: negll_grad(t)[1], theta) * n
    cov_t = _invert_information(hess)
    sigma = math.exp(theta[p])
    jac = np.ones(p + 1)
    jac[p] = sigma
    vcov = cov_t * np.outer(jac, jac)
    names_out = tuple(["alpha0", "alpha1"] + [f"alpha_{nm}" for nm in names[2:]] + ["sigma"])
    return ClassicTobitFit(
        alpha0=float(theta[0]),
        alpha1=float(theta[1]),
        sigma=sigma,
        alpha2=theta[2:p].copy(),
        vcov=vcov,
        loglik=float(-negll_grad(theta)[0] * n),
        converged=converged,
        n_obs=sample.n,
        param_names=names_out,
        theta_internal=theta.copy(),
        vcov_internal=cov_t,
    )


def _iv_negll_grad_factory(y, d, a_y, a_d, fix_rho=None):
    cens = y == 0.0
    p_y, p_d = a_y.shape[1], a_d.shape[1]
    n = y.shape[0]

    def negll_grad(theta):
        b = theta[:p_y]
        g = theta[p_y:p_y + p_d]
        lw, lv = theta[p_y + p_d], theta[p_y + p_d + 1]
        t = math.atanh(fix_rho) if fix_rho is not None else theta[p_y + p_d + 2]
        sw, sv = math.exp(lw), math.exp(lv)
        rho = math.tanh(t)
        s = math.sqrt(1.0 - rho * rho)
        kap = rho * sw / sv
        sc = sw * s

        mu_y = a_y @ b
        mu_d = a_d @ g
        u2 = d - mu_d
        vt = u2 / sv
        u1 = np.where(cens, -mu_y, y - mu_y)
        e = (u1 - kap * u2) / sc

        ll_first = -lv - 0.5 * vt * vt - 0.5 * _LOG_2PI
        ll = np.where(
            cens,
            ll_first + special.log_ndtr(e),
            ll_first - math.log(sc) - 0.5 * e * e - 0.5 * _LOG_2PI,
        ).sum()

        # d ll / d e enters every chain rule: -e when observed, mills(e) when censored
        de = np.where(cens, inverse_mills(e), -e)
        g_mu_y = de * (-1.0 / sc)
        g_mu_d = vt / sv + de * (kap / sc)
        g_lw = de * (-kap * u2 / sc - e) + np.where(cens, 0.0, -1.0)
        g_lv = -1.0 + vt * vt + de * (kap * u2 / sc)
        g_t = de * (-u2 * s / sv + e * rho) + np.where(cens, 0.0, rho)

        grad = np.concatenate([
            a_y.T @ g_mu_y,
            a_d.T @ g_mu_d,
            [g_lw.sum(), g_lv.sum()],
        ])
        if fix_rho is None:
            grad = np.concatenate([grad, [g_t.sum()]])
        return -ll / n, -grad / n

    return negll_grad


def fit_iv_tobit(
    sample: Sample,
    include_covariates: bool = False,
    gtol: float = 1e-6,
    maxiter: int = 500,
    fix_rho: Optional[float] = None,
) -> IvTobitFit:
    """Fit the instrumented censored system by joint maximum likelihood.

    Instrument relevance is not required up front (it is one of the
    assumptions under test); a weak first stage is flagged on the result.
    """
    if sample.z is None:
        raise InputError("fit_iv_tobit needs an instrument column z")
    sample.require_censoring_interior("fit_iv_tobit")
    a_y, names_y = _design(sample, sample.z, include_covariates, "z")
    a_d = a_y                       # same exogenous variables in both equations
    y, d = sample.y, sample.d
    p = a_y.shape[1]

    negll_grad = _iv_negll_grad_factory(y, d, a_y, a_d, fix_rho)

    g0, *_ = np.linalg.lstsq(a_d, d, rcond=None)
    sv0 = max(np.std(d - a_d @ g0), 1e-3)
    pos = y > 0.0
    b0, *_ = np.linalg.lstsq(a_y[pos], y[pos], rcond=None)
    sw0 = max(np.std(y[pos] - a_y[pos] @ b0), 1e-3)
    theta0 = np.concatenate([b0, g0, [math.log(sw0), math.log(sv0)]])
    if fix_rho is None:
        theta0 = np.concatenate([theta0, [0.0]])

    theta, converged = _maximize(negll_grad, theta0, gtol, maxiter, "IV Tobit MLE")
    hess = _fd_hessian(lambda t: negll_grad(t)[1], theta) * sample.n
    cov_t = _invert_information(hess)

    b = theta[:p]
    g = theta[p:2 * p]
    sw, sv = math.exp(theta[2 * p]), math.exp(theta[2 * p + 1])
    rho = fix_rho if fix_rho is not None else math.tanh(theta[2 * p + 2])
    rho_boundary = abs(rho) > 1.0 - 1e-6

    # natural-scale covariance via the diagonal transform Jacobian
    jac = np.ones(theta.size)
    jac[2 * p] = sw
    jac[2 * p + 1] = sv
    if fix_rho is None:
        jac[2 * p + 2] = 1.0 - rho * rho
    vcov = cov_t * np.outer(jac, jac)
    if fix_rho is not None:
        # pad a zero row/column so the rho slot always exists
        vcov = np.pad(vcov, ((0, 1), (0, 1)))

    names_out = (
        ["beta0", "beta1"] + [f"beta_x{k}" for k in range(p - 2)]
        + ["gamma0", "gamma1"] + [f"gamma_x{k}" for k in range(p - 2)]
        + ["sigma_w", "sigma_v", "rho"]
    )
    alpha1 = b[1] / g[1] if g[1] != 0.0 else math.nan
    alpha0 = b[0] - alpha1 * g[0]
    alpha2 = b[2:] - alpha1 * g[2:]
    se_g1 = math.sqrt(vcov[p + 1, p + 1])
    weak = bool(se_g1 == 0.0 or abs(g[1]) / se_g1 < 2.0)
    return IvTobitFit(
        beta0=float(b[0]),
        beta1=float(b[1]),
        gamma0=float(g[0]),
        gamma1=float(g[1]),
        rho=float(rho),
        sigma_w=sw,
        sigma_v=sv,
        alpha0=float(alpha0),
        alpha1=float(alpha1),
        beta2=b[2:].copy(),
        gamma2=g[2:].copy(),
        alpha2=alpha2,
        vcov=vcov,
        loglik=float(-negll_grad(theta)[0] * sample.n),
        converged=converged,
        n_obs=sample.n,
        param_names=tuple(names_out),
        rho_boundary=rho_boundary,
        weak_first_stage=weak,
        theta_internal=(theta.copy() if fix_rho is None
                        else np.concatenate([theta, [math.atanh(fix_rho)]])),
        vcov_internal=cov_t if fix_rho is None else np.pad(cov_t, ((0, 1), (0, 1))),
    )


def classic_obs_scores(sample: Sample, fit: ClassicTobitFit,
                       include_covariates: bool = False) -> np.ndarray:
    """Per-observation log-likelihood scores at the optimizer coordinates."""
    a, _ = _design(sample, sample.d, include_covariates, "d")
    theta = fit.theta_internal
    p = a.shape[1]
    coef, ls = theta[:p], theta[p]
    s = math.exp(ls)
    mu = a @ coef
    cens = sample.y == 0.0
    r = (sample.y - mu) / s
    e0 = -mu / s
    g_mu = np.where(cens, -inverse_mills(e0) / s, r / s)
    g_ls = np.where(cens, -inverse_mills(e0) * e0, r * r - 1.0)
    return np.column_stack([a * g_mu[:, None], g_ls])


def iv_obs_scores(sample: Sample, fit: IvTobitFit,
                  include_covariates: bool = False) -> np.ndarray:
    """Per-observation log-likelihood scores at the optimizer coordinates."""
    a, _ = _design(sample, sample.z, include_covariates, "z")
    theta = fit.theta_internal
    p = a.shape[1]
    b = theta[:p]
    g = theta[p:2 * p]
    lw, lv, t = theta[2 * p], theta[2 * p + 1], theta[2 * p + 2]
    sw, sv = math.exp(lw), math.exp(lv)
    rho = math.tanh(t)
    s = math.sqrt(1.0 - rho * rho)
    kap = rho * sw / sv
    sc = sw * s
    y, d = sample.y, sample.d
    cens = y == 0.0
    mu_y = a @ b
    mu_d = a @ g
    u2 = d - mu_d
    vt = u2 / sv
    u1 = np.where(cens, -mu_y, y - mu_y)
    e = (u1 - kap * u2) / sc
    de = np.where(cens, inverse_mills(e), -e)
    g_mu_y = de * (-1.0 / sc)
    g_mu_d = vt / sv + de * (kap / sc)
    g_lw = de * (-kap * u2 / sc - e) + np.where(cens, 0.0, -1.0)
    g_lv = -1.0 + vt * vt + de * (kap * u2 / sc)
    g_t = de * (-u2 * s / sv + e * rho) + np.where(cens, 0.0, rho)
    return np.column_stack([a * g_mu_y[:, None], a * g_mu_d[:, None],
                            g_lw, g_lv, g_t])


def moment_identify_classic(sample: Sample, bins=20) -> tuple[float, float]:
    """Scaled coefficients from the mass-point identification argument.

    Bins D (equal-count by default), estimates P(Y=0 | bin), applies the
    inverse normal CDF to 1 - P, and regresses the transform on the bin means
    of D. Returns (alpha0/sigma, alpha1/sigma).
    """
    d, y = sample.d, sample.y
    if isinstance(bins, (int, np.integer)):
        if bins < 2:
            raise InputError("need at least 2 bins")
        edges = np.unique(np.quantile(d, np.arange(1, bins) / bins))
    else:
        edges = np.unique(np.asarray(bins, dtype=float))
    labels = np.searchsorted(edges, d, side="left")
    mids, probs = [], []
    for bin_id in np.unique(labels):
        mask = labels == bin_id
        count = int(mask.sum())
        if count < 30:
            raise InputError(f"bin {bin_id} has {count} observations (< 30)")
        phat = float(np.mean(y[mask] == 0.0))
        if phat in (0.0, 1.0):
            raise InputError(
                f"bin {bin_id} has censoring probability {phat:g}; "
                "the inverse-CDF transform is undefined there"
            )
        mids.append(float(np.mean(d[mask])))
        probs.append(phat)
    if len(mids) < 2:
        raise InputError("fewer than 2 usable bins (is D constant?)")
    transform = special.ndtri(1.0 - np.asarray(probs))
    mids = np.asarray(mids)
    slope, intercept = np.polyfit(mids, transform, 1)
    return float(intercept), float(slope)


def moment_identify_iv_firststage(sample: Sample) -> tuple[float, float]:
    """First-stage coefficients from the exact OLS closed form."""
    if sample.z is None:
        raise InputError("no instrument column z")
    z, d = sample.z, sample.d
    zc = z - z.mean()
    denom = float(zc @ zc)
    if denom == 0.0:
        raise InputError("Var(Z) = 0: instrument is constant")
    gamma1 = float(zc @ d) / denom
    gamma0 = float(d.mean() - gamma1 * z.mean())
    return gamma0, gamma1


def recover_sigma_system(sample: Sample, scaled: tuple[float, float]) -> tuple[float, float, float]:
    """Back out (alpha0, alpha1, sigma) from the scaled coefficients.

    Uses the truncated conditional mean on the Y > 0 subsample: regressing Y
    on [1, D, mills(a0 + a1 D)] solves the three-moment linear system whose
    coefficients are (alpha0, alpha1, sigma).
    """
    a0, a1 = scaled
    pos = sample.y > 0.0
    if not pos.any():
        raise InputError("no positive outcomes to recover sigma from")
    d = sample.d[pos]
    lam = inverse_mills(a0 + a1 * d)
    design = np.column_stack([np.ones(d.size), d, lam])
    gram = design.T @ design
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularSystemError(
            f"mills regressor is collinear with D (condition number {cond:.2e})"
        )
    coef = np.linalg.solve(gram, design.T @ sample.y[pos])
    return float(coef[0]), float(coef[1]), float(coef[2])
