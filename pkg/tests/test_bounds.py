"""Monotone-selection bound tests: quotients, derivatives, bootstrap limits."""

import math

import numpy as np
import pytest

from tobitcheck.bounds import (
    binned_levels,
    bound_confidence,
    mts_bound_continuous,
    mts_bound_discrete,
)
from tobitcheck.data import Sample
from tobitcheck.errors import InputError


def binary_sample(mean1=5.0, mean0=3.0, n=200, seed=0):
    rng = np.random.default_rng(seed)
    d = np.repeat([0.0, 1.0], n // 2)
    y = np.where(d == 1.0, mean1, mean0) + 0.0 * rng.standard_normal(n)
    y[:3] = 0.0   # a few censored rows so the sample looks like censored data
    return Sample(y=y, d=d)


def linear_positive_sample(n=600, slope=1.0, noise=0.5, seed=0):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.0, 2.0, n)
    y = 5.0 + slope * d + noise * rng.standard_normal(n)
    return Sample(y=np.maximum(0.0, y), d=d)


class TestDiscreteBound:
    def test_binary_lower_bound(self):
        s = binary_sample()
        res = mts_bound_discrete(s, [(1.0, 0.0)], "decreasing", min_count=10)
        assert res.lower_bound == pytest.approx(2.0, abs=1e-12)
        assert res.upper_bound is None

    def test_equal_means_bound_zero(self):
        s = binary_sample(mean1=3.0, mean0=3.0)
        res = mts_bound_discrete(s, [(1.0, 0.0)], "decreasing", min_count=10)
        assert res.lower_bound == pytest.approx(0.0, abs=1e-12)

    def test_increasing_direction_upper(self):
        s = binary_sample()
        res = mts_bound_discrete(s, [(1.0, 0.0)], "increasing", min_count=10)
        assert res.upper_bound == pytest.approx(2.0, abs=1e-12)
        assert res.lower_bound is None

    def test_more_pairs_never_loosen(self):
        rng = np.random.default_rng(1)
        d = np.repeat(np.arange(4.0), 60)
        y = 1.0 + 0.8 * d + 0.3 * rng.standard_normal(d.size)
        s = Sample(y=np.maximum(0.0, y), d=d)
        pairs_small = [(1.0, 0.0), (2.0, 1.0)]
        pairs_large = pairs_small + [(3.0, 2.0), (3.0, 0.0)]
        lo_small = mts_bound_discrete(s, pairs_small, min_count=10).lower_bound
        lo_large = mts_bound_discrete(s, pairs_large, min_count=10).lower_bound
        assert lo_large >= lo_small

    def test_requires_enough_positives(self):
        s = binary_sample(n=40)
        with pytest.raises(InputError, match="fewer than"):
            mts_bound_discrete(s, [(1.0, 0.0)], min_count=30)

    def test_pair_ordering_enforced(self):
        s = binary_sample()
        with pytest.raises(InputError, match="d > d\\*"):
            mts_bound_discrete(s, [(0.0, 1.0)], min_count=10)

    @pytest.mark.slow
    def test_valid_model_implies_bound_below_slope(self):
        # under a correctly specified censored-normal model the latent selection
        # term is decreasing, so the quotient bound sits below the true slope
        hits = 0
        reps = 200
        for rep in range(reps):
            rng = np.random.Generator(
                np.random.Philox(seed=np.random.SeedSequence([404, rep])))
            n = 5000
            d = rng.standard_normal(n)
            y = np.maximum(0.0, -0.5 + d + rng.standard_normal(n))
            s = Sample(y=y, d=d)
            levels, _, _ = binned_levels(s, n_bins=5, min_count=20)
            pairs = [(float(b), float(a)) for a, b in zip(levels[:-1], levels[1:])]
            atol = float(np.diff(levels).max())
            res = mts_bound_discrete(s, pairs, atol=atol, min_count=20)
            hits += res.lower_bound <= 1.0
        assert hits / reps >= 0.95


class TestContinuousBound:
    def test_linear_design_recovers_slope(self):
        s = linear_positive_sample(n=4000, slope=1.0, seed=3)
        res = mts_bound_continuous(s, grid_size=7)
        best = max(res.evaluation, key=lambda r: r["derivative"])
        assert abs(res.lower_bound - 1.0) <= 3 * best["se"] + 0.05

    def test_constant_design_near_zero(self):
        s = linear_positive_sample(n=4000, slope=0.0, seed=4)
        res = mts_bound_continuous(s, grid_size=7)
        best = max(res.evaluation, key=lambda r: r["derivative"])
        assert abs(res.lower_bound) <= 3 * best["se"] + 0.05

    def test_direction_mirror(self):
        # identical data with D negated: the decreasing-direction max of the
        # derivative maps exactly onto the increasing-direction min
        s = linear_positive_sample(n=2000, slope=0.7, seed=5)
        lo = mts_bound_continuous(s, direction="decreasing", grid_size=5)
        flipped = Sample(y=s.y, d=-s.d)
        hi = mts_bound_continuous(flipped, direction="increasing", grid_size=5)
        assert hi.upper_bound == pytest.approx(-lo.lower_bound, abs=1e-10)

    def test_needs_enough_positives(self):
        s = linear_positive_sample(n=300)
        with pytest.raises(InputError, match="positive"):
            mts_bound_continuous(s)

    def test_grid_outside_band_rejected(self):
        s = linear_positive_sample(n=1000)
        with pytest.raises(InputError, match="percentile"):
            mts_bound_continuous(s, grid=np.array([10.0]))

    def test_covariate_partial_out_null_effect(self):
        rng = np.random.default_rng(6)
        n = 3000
        d = rng.uniform(0, 2, n)
        x = rng.standard_normal((n, 1))
        y = 5.0 + d + 0.0 * x[:, 0] + 0.4 * rng.standard_normal(n)
        plain = mts_bound_continuous(Sample(y=y, d=d), grid_size=5)
        withx = mts_bound_continuous(Sample(y=y, d=d, x=x), covariates=True,
                                     grid_size=5)
        ses = [r["se"] for r in plain.evaluation]
        assert abs(plain.lower_bound - withx.lower_bound) <= 3 * max(ses)


class TestBoundConfidence:
    def test_limit_below_point_and_deterministic(self):
        s = linear_positive_sample(n=1200, seed=7)
        a = bound_confidence(s, "continuous", boot_reps=200, seed=11, grid_size=5)
        b = bound_confidence(s, "continuous", boot_reps=200, seed=11, grid_size=5)
        assert a.ci_limit <= a.bound
        assert a.ci_limit == b.ci_limit

    def test_requires_enough_reps(self):
        s = linear_positive_sample(n=1200)
        with pytest.raises(InputError, match="200"):
            bound_confidence(s, "continuous", boot_reps=50)

    def test_degenerate_bootstrap_detected(self):
        s = binary_sample(n=400)
        with pytest.raises(InputError, match="degenerate"):
            bound_confidence(s, "discrete", boot_reps=200,
                             pairs=[(1.0, 0.0)], min_count=10)

    @pytest.mark.slow
    def test_coverage_linear_design(self):
        covered = 0
        reps = 200
        for rep in range(reps):
            s = linear_positive_sample(n=600, slope=1.0, noise=0.5,
                                       seed=1_000 + rep)
            res = bound_confidence(s, "continuous", boot_reps=200,
                                   alpha=0.05, seed=rep, grid_size=5)
            covered += res.ci_limit <= 1.0
        assert covered / reps >= 0.90
