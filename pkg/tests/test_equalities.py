"""Implied-probability evaluators: closure, oracles, and the sharpness round trip."""

import math
import warnings

import numpy as np
import pytest

from tobitcheck.data import Sample
from tobitcheck.equalities import (
    Cell,
    ClassicIndex,
    IvIndex,
    Partition,
    Type2Params,
    build_partition,
    classic_implied_prob,
    iv_implied_prob,
    simulate_from_model,
    type2_implied_prob,
)
from tobitcheck.errors import InputError, PartitionError
from tobitcheck.estimate import ClassicTobitFit, IvTobitFit
from tobitcheck.numcore import bivnorm_cdf, std_normal_cdf


def make_classic_fit(alpha0=0.0, alpha1=1.0, sigma=1.0, alpha2=()):
    k = 3 + len(alpha2)
    return ClassicTobitFit(
        alpha0=alpha0, alpha1=alpha1, sigma=sigma,
        alpha2=np.asarray(alpha2, dtype=float),
        vcov=np.eye(k), loglik=0.0, converged=True, n_obs=0,
        param_names=tuple(["alpha0", "alpha1"] + [f"a{j}" for j in range(len(alpha2))]
                          + ["sigma"]),
    )


def make_iv_fit(beta0=0.0, beta1=1.0, gamma0=0.0, gamma1=2.0, rho=0.5,
                sigma_w=1.0, sigma_v=1.0, beta2=(), gamma2=()):
    p = 2 + len(beta2)
    k = 2 * p + 3
    alpha1 = beta1 / gamma1
    return IvTobitFit(
        beta0=beta0, beta1=beta1, gamma0=gamma0, gamma1=gamma1, rho=rho,
        sigma_w=sigma_w, sigma_v=sigma_v,
        alpha0=beta0 - alpha1 * gamma0, alpha1=alpha1,
        beta2=np.asarray(beta2, dtype=float),
        gamma2=np.asarray(gamma2, dtype=float),
        alpha2=np.asarray(beta2, dtype=float) - alpha1 * np.asarray(gamma2, dtype=float),
        vcov=np.eye(k), loglik=0.0, converged=True, n_obs=0,
        param_names=tuple(f"p{j}" for j in range(k)),
    )


class TestPartition:
    def test_default_quartile_cuts(self):
        rng = np.random.default_rng(0)
        y = np.maximum(0.0, rng.normal(0.5, 1.0, 4000))
        s = Sample(y=y, d=rng.normal(size=4000))
        part = build_partition(s, 4)
        pos = y[y > 0]
        want = np.quantile(pos, [0.25, 0.5, 0.75])
        assert np.allclose(part.y_cuts, want)
        assert part.n_y_cells == 5

    def test_k1_single_median_cut(self):
        rng = np.random.default_rng(1)
        y = np.maximum(0.0, rng.normal(0.5, 1.0, 500))
        s = Sample(y=y, d=rng.normal(size=500))
        part = build_partition(s, 1)
        assert part.y_cuts.size == 1
        assert part.y_cuts[0] == pytest.approx(np.median(y[y > 0]))
        kinds = [c.y_kind for c in part.cells()]
        assert kinds == ["zero", "interval", "upper"]

    def test_too_few_positives(self):
        y = np.concatenate([np.zeros(100), np.linspace(0.1, 1.0, 40)])
        s = Sample(y=y, d=np.arange(140.0))
        with pytest.raises(PartitionError, match="positive outcomes"):
            build_partition(s, 4)

    def test_iv_cell_count(self):
        rng = np.random.default_rng(2)
        n = 6000
        d = rng.normal(size=n)
        y = np.maximum(0.0, d + rng.normal(size=n))
        s = Sample(y=y, d=d, z=rng.normal(size=n))
        part = build_partition(s, 4, 4)
        assert part.n_d_cells == 5
        assert len(part.cells()) == 25    # (k + 1) x (q + 1)

    def test_duplicate_cuts_collapse_with_warning(self):
        y = np.concatenate([np.zeros(200), np.full(500, 2.0),
                            np.full(200, 5.0), np.full(100, 7.0)])
        s = Sample(y=y, d=np.arange(1000.0))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            part = build_partition(s, 4)
        assert any("collapsed" in str(w.message) for w in caught)
        assert part.y_cuts.size < 3

    def test_cuts_must_be_positive_increasing(self):
        with pytest.raises(PartitionError):
            Partition(np.array([0.0, 1.0]))
        with pytest.raises(PartitionError):
            Partition(np.array([2.0, 1.0]))

    def test_scaled(self):
        part = Partition(np.array([1.0, 2.0]), np.array([-1.0, 3.0]))
        scaled = part.scaled(0.5, 2.0)
        assert np.allclose(scaled.y_cuts, [0.5, 1.0])
        assert np.allclose(scaled.d_cuts, [-2.0, 6.0])


class TestClassicImplied:
    def test_mass_point(self):
        idx = ClassicIndex(0.0, 1.0)
        assert classic_implied_prob(idx, 0.0, Cell("zero")) == 0.5

    def test_interval_oracle(self):
        idx = ClassicIndex(0.0, 1.0)
        cell = Cell("interval", y_lo=0.0, y_hi=1.0)
        # Phi(1) - Phi(0), frozen from the erf-series oracle in test_numcore
        assert classic_implied_prob(idx, 0.0, cell) == pytest.approx(
            0.3413447460685429, abs=1e-15)

    def test_total_probability(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            cuts = np.sort(rng.uniform(0.1, 3.0, rng.integers(1, 5)))
            cuts = np.unique(cuts)
            part = Partition(cuts)
            idx = ClassicIndex(rng.normal(), rng.normal())
            d = rng.normal()
            total = sum(classic_implied_prob(idx, d, c) for c in part.cells())
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_monotone_in_interval_width(self):
        idx = ClassicIndex(0.2, 0.7)
        smaller = classic_implied_prob(idx, 0.5, Cell("interval", y_lo=0.5, y_hi=1.0))
        larger = classic_implied_prob(idx, 0.5, Cell("interval", y_lo=0.3, y_hi=1.2))
        assert larger >= smaller

    def test_covariates_zero_equals_plain(self):
        idx0 = ClassicIndex(0.1, 0.9)
        idxx = ClassicIndex(0.1, 0.9, alpha2=(0.0, 0.0))
        cell = Cell("interval", y_lo=0.2, y_hi=0.9)
        x = np.array([[1.0, -2.0]])
        with_x = classic_implied_prob(idxx, np.array([0.3]), cell, x)
        assert with_x[0] == classic_implied_prob(idx0, 0.3, cell)


class TestIvImplied:
    def test_independence_factorizes(self):
        idx = IvIndex(0.0, 1.0, 0.0, 2.0, rho=0.0)
        z = 0.3
        cell = Cell("interval", y_lo=0.2, y_hi=0.8, d_kind="interval",
                    d_lo=-0.5, d_hi=0.4)
        got = iv_implied_prob(idx, z, None, cell)
        py = std_normal_cdf(0.8 - z) - std_normal_cdf(0.2 - z)
        pd = std_normal_cdf(0.4 - 2 * z) - std_normal_cdf(-0.5 - 2 * z)
        assert got == pytest.approx(py * pd, abs=1e-12)

    def test_total_probability_random(self):
        rng = np.random.default_rng(4)
        for _ in range(40):
            part = Partition(
                np.unique(np.sort(rng.uniform(0.1, 3.0, 3))),
                np.unique(np.sort(rng.normal(0.0, 1.5, rng.integers(1, 5)))),
            )
            idx = IvIndex(rng.normal(), rng.normal(), rng.normal(), rng.normal(),
                          rho=rng.uniform(-0.95, 0.95))
            z = rng.normal()
            total = sum(iv_implied_prob(idx, z, None, c) for c in part.cells())
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_oracle(self):
        # beta=(0,1), gamma=(0,2), rho=0.5, z=0.3, cell {Y in (0.2, 0.8], D <= 0.1}
        idx = IvIndex(0.0, 1.0, 0.0, 2.0, rho=0.5)
        cell = Cell("interval", y_lo=0.2, y_hi=0.8, d_kind="lower", d_hi=0.1)
        got = iv_implied_prob(idx, 0.3, None, cell)
        rng = np.random.default_rng(20221201)
        n = 10_000_000
        v = rng.standard_normal(n)
        w = 0.5 * v + math.sqrt(1 - 0.25) * rng.standard_normal(n)
        y = np.maximum(0.0, 0.3 + w)
        d = 0.6 + v
        hit = (y > 0.2) & (y <= 0.8) & (d <= 0.1)
        p_hat = hit.mean()
        se = math.sqrt(p_hat * (1 - p_hat) / n)
        assert abs(got - p_hat) <= 3 * se

    def test_covariate_indexes(self):
        idx = IvIndex(0.0, 1.0, 0.0, 2.0, rho=0.3, beta2=(0.5,), gamma2=(-1.0,))
        cell = Cell("zero", d_kind="lower", d_hi=0.0)
        x = np.array([[2.0]])
        got = iv_implied_prob(idx, np.array([0.1]), x, cell)
        # shifting the indexes by hand must agree
        want = bivnorm_cdf(0.0 - 0.1 - 1.0, 0.0 - 0.2 + 2.0, 0.3)
        assert got[0] == pytest.approx(float(want), abs=1e-14)

    def test_covariates_zero_equal_plain(self):
        plain = IvIndex(0.1, 0.8, -0.2, 1.5, rho=0.4)
        withx = IvIndex(0.1, 0.8, -0.2, 1.5, rho=0.4, beta2=(0.0,), gamma2=(0.0,))
        cell = Cell("upper", y_lo=1.0, d_kind="upper", d_lo=0.5)
        x = np.array([[3.0]])
        assert iv_implied_prob(withx, np.array([0.2]), x, cell)[0] == \
            iv_implied_prob(plain, 0.2, None, cell)


class TestType2Implied:
    def test_independence_factorizes(self):
        params = Type2Params(0.0, 1.0, 0.0, 1.0, sigma_u=2.0, sigma_v=1.5, rho_uv=0.0)
        cell = Cell("interval", y_lo=0.1, y_hi=1.4)
        got = type2_implied_prob(params, 0.4, 0.7, cell)
        p_y = std_normal_cdf((1.4 - 0.4) / 2.0) - std_normal_cdf((0.1 - 0.4) / 2.0)
        p_s = 1.0 - std_normal_cdf(-0.7 / 1.5)
        assert got == pytest.approx(p_y * p_s, abs=1e-12)

    def test_missing_limit(self):
        params = Type2Params(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.3)
        assert type2_implied_prob(params, 0.0, 40.0, Cell("missing")) < 1e-300

    def test_closure(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            params = Type2Params(
                rng.normal(), rng.normal(), rng.normal(), rng.normal(),
                sigma_u=rng.uniform(0.5, 2.0), sigma_v=rng.uniform(0.5, 2.0),
                rho_uv=rng.uniform(-0.9, 0.9),
            )
            cuts = np.sort(rng.normal(0, 2, 3))
            cells = [Cell("missing"),
                     Cell("interval", y_lo=-np.inf, y_hi=cuts[0]),
                     Cell("interval", y_lo=cuts[0], y_hi=cuts[1]),
                     Cell("interval", y_lo=cuts[1], y_hi=cuts[2]),
                     Cell("upper", y_lo=cuts[2])]
            d, z = rng.normal(), rng.normal()
            total = sum(type2_implied_prob(params, d, z, c) for c in cells)
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_oracle(self):
        params = Type2Params(0.2, 0.8, -0.1, 1.2, sigma_u=1.4, sigma_v=0.9,
                             rho_uv=0.55)
        d0, z0 = 0.5, 0.3
        cell = Cell("interval", y_lo=0.1, y_hi=1.5)
        got = type2_implied_prob(params, d0, z0, cell)
        rng = np.random.default_rng(77)
        n = 10_000_000
        u = rng.standard_normal(n)
        v = params.rho_uv * u + math.sqrt(1 - params.rho_uv**2) * rng.standard_normal(n)
        y_star = params.alpha0 + params.alpha1 * d0 + params.sigma_u * u
        select = params.gamma0 + params.gamma1 * z0 + params.sigma_v * v >= 0.0
        hit = select & (y_star >= 0.1) & (y_star <= 1.5)
        p_hat = hit.mean()
        se = math.sqrt(p_hat * (1 - p_hat) / n)
        assert abs(got - p_hat) <= 3 * se

    def test_rejects_zero_cell(self):
        params = Type2Params(0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0)
        with pytest.raises(InputError):
            type2_implied_prob(params, 0.0, 0.0, Cell("zero"))


class TestSimulateFromModel:
    def test_classic_censoring_rate(self):
        fit = make_classic_fit(0.0, 1.0, 1.0)
        n = 200_000
        s = simulate_from_model(fit, np.zeros(n), seed=1)
        se = math.sqrt(0.25 / n)
        assert abs(s.censoring_fraction - 0.5) <= 3 * se

    def test_deterministic_given_seed(self):
        fit = make_classic_fit(0.1, 0.5, 1.2)
        d = np.linspace(-2, 2, 500)
        a = simulate_from_model(fit, d, seed=42)
        b = simulate_from_model(fit, d, seed=42)
        assert np.array_equal(a.y, b.y)

    def test_iv_residual_correlation(self):
        # push the intercept up so the latent outcome is essentially never
        # censored and both residuals can be recovered for every row
        fit = make_iv_fit(beta0=8.0, rho=0.8)
        n = 1_000_000
        rng = np.random.default_rng(9)
        z = rng.standard_normal(n)
        s = simulate_from_model(fit, z, seed=5)
        pos = s.y > 0
        assert pos.mean() > 0.9999
        v = (s.d[pos] - fit.gamma0 - fit.gamma1 * z[pos]) / fit.sigma_v
        w = (s.y[pos] - fit.beta0 - fit.beta1 * z[pos]) / fit.sigma_w
        assert abs(np.corrcoef(w, v)[0, 1] - 0.8) < 0.01

    def test_empty_exogenous_rejected(self):
        with pytest.raises(InputError):
            simulate_from_model(make_classic_fit(), np.array([]), seed=0)


@pytest.mark.slow
class TestSharpnessRoundTrip:
    """Simulated data reproduces the implied cell probabilities (3 binomial SE)."""

    def test_classic(self):
        fit = make_classic_fit(0.25, 1.0, 1.0)
        n = 1_000_000
        for d0 in (-0.4, 0.7):
            s = simulate_from_model(fit, np.full(n, d0), seed=int(10 * abs(d0)))
            part = build_partition(s, 4)
            idx = fit.normalized()
            scaled = part.scaled(1.0 / fit.sigma)
            for raw, sc in zip(part.cells(), scaled.cells()):
                p = classic_implied_prob(idx, d0, sc)
                freq = raw.indicator(s.y, s.d).mean()
                se = math.sqrt(max(p * (1 - p), 1e-12) / n)
                assert abs(freq - p) <= 3 * se + 1e-9, raw.label

    def test_iv(self):
        fit = make_iv_fit(beta0=0.1, beta1=1.0, gamma0=0.0, gamma1=2.0, rho=0.6,
                          sigma_w=1.3, sigma_v=0.8)
        n = 1_000_000
        for z0 in (0.0, 0.5):
            s = simulate_from_model(fit, np.full(n, z0), seed=int(100 * z0) + 3)
            part = build_partition(s, 4, 4)
            idx = fit.normalized()
            scaled = part.scaled(1.0 / fit.sigma_w, 1.0 / fit.sigma_v)
            for raw, sc in zip(part.cells(), scaled.cells()):
                p = iv_implied_prob(idx, z0, None, sc)
                freq = raw.indicator(s.y, s.d).mean()
                se = math.sqrt(max(p * (1 - p), 1e-12) / n)
                assert abs(freq - p) <= 3 * se + 1e-9, raw.label
