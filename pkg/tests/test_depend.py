"""Tests for mixing curves, block sums, coupling and concentration checks."""

import numpy as np
import pytest

from shared.types import BlockSet, MixingRegime
from tdmix import chain, depend
from tdmix.errors import (
    DimensionMismatch,
    InsufficientSeeds,
    InvalidParameter,
    TrajectoryTooShort,
)


class TestMixingCurves:
    """Tests for exact covariance and TV mixing curves."""

    def test_lag_grid(self):
        """Endpoints included, strictly increasing, inside the range."""
        grid = depend.lag_grid(5, 80)
        assert grid[0] == 5 and grid[-1] == 80
        assert np.all(np.diff(grid) > 0)

    def test_two_state_covariance(self, two_state):
        """Cov of the state-0 indicator is pi0 pi1 (1 - p - q)^k."""
        lags = [0, 1, 2, 5, 10]
        indicator = [1.0, 0.0]
        cov = depend.lag_covariance(two_state, indicator, indicator, lags)
        np.testing.assert_allclose(cov, (2 / 9) * 0.7 ** np.array(lags), atol=1e-12)

    def test_callable_functional(self, two_state):
        """Functionals may be given as callables on states."""
        vector = depend.lag_covariance(two_state, [1.0, 0.0], [1.0, 0.0], [3])
        function = depend.lag_covariance(two_state, lambda s: float(s == 0), lambda s: float(s == 0), [3])
        np.testing.assert_allclose(vector, function)

    def test_functional_length(self, two_state):
        """Vectors must cover every state."""
        with pytest.raises(DimensionMismatch):
            depend.lag_covariance(two_state, [1.0, 0.0, 0.0], [1.0, 0.0], [1])

    def test_negative_lag(self, two_state):
        """Lags are nonnegative."""
        with pytest.raises(InvalidParameter):
            depend.lag_covariance(two_state, [1.0, 0.0], [1.0, 0.0], [-1])

    def test_finite_chain_is_geometric(self, two_state):
        """A two-state chain decays geometrically and is flagged as such."""
        estimate = depend.covariance_mixing(two_state, [1.0, 0.0], [1.0, 0.0], depend.lag_grid(1, 40))
        assert estimate.regime == MixingRegime.GEOMETRIC
        assert estimate.geometric_rate == pytest.approx(0.7, rel=1e-6)

    def test_renewal_is_polynomial(self):
        """TV for the renewal chain decays like a power of the lag."""
        kernel = chain.make_renewal_chain(2.5, 400)
        estimate = depend.tv_mixing(kernel, 0, depend.lag_grid(5, 80))
        assert estimate.regime == MixingRegime.POLYNOMIAL
        assert estimate.fit is not None
        assert 0.5 < estimate.fit.exponent < 3.0
        assert estimate.geometric_rate is None

    def test_renewal_kappa_two(self):
        """kappa = 2 on 200 states decays like t^-1 over lags 5 to 80."""
        kernel = chain.make_renewal_chain(2.0, 200)
        estimate = depend.tv_mixing(kernel, 0, depend.lag_grid(1, 160), (5, 80))
        assert estimate.regime == MixingRegime.POLYNOMIAL
        assert 0.7 <= estimate.fit.exponent <= 1.3
        assert estimate.fit.r_squared >= 0.98

    def test_iid_chain_is_degenerate(self):
        """Curves that vanish at once cannot be fitted."""
        kernel = chain.make_iid_chain([0.2, 0.3, 0.5], [0.0, 1.0, -1.0])
        estimate = depend.block_independence_curve(kernel, [1, 2, 4, 8, 16, 32, 64])
        assert estimate.regime == MixingRegime.DEGENERATE
        assert estimate.fit is None
        assert np.all(estimate.values < 1e-12)


class TestBlocks:
    """Tests for block sums and the block covariance check."""

    def test_make_blocks(self, two_state):
        """Eleven visited states hold three blocks of three."""
        trajectory = chain.sample_trajectory(two_state, 0, 10, seed=0)
        blocks = depend.make_blocks(trajectory, [1.0, 0.0], 3)
        assert blocks.n_blocks == 3
        observed = (trajectory.states == 0).astype(float)
        np.testing.assert_allclose(blocks.sums, observed[:9].reshape(3, 3).sum(axis=1))

    def test_make_blocks_too_short(self, two_state):
        """Two blocks must fit in the trajectory."""
        trajectory = chain.sample_trajectory(two_state, 0, 10, seed=0)
        with pytest.raises(TrajectoryTooShort):
            depend.make_blocks(trajectory, [1.0, 0.0], 6)
        with pytest.raises(InvalidParameter):
            depend.make_blocks(trajectory, [1.0, 0.0], 0)

    def test_covariance_check_needs_seeds(self, two_state):
        """Fewer than a hundred seeds are refused."""
        blocksets = [
            depend.make_blocks(chain.sample_trajectory(two_state, 0, 50, seed=s), [1.0, 0.0], 5)
            for s in range(10)
        ]
        with pytest.raises(InsufficientSeeds):
            depend.block_covariance_check(blocksets, beta_nominal=1.0)

    def test_covariance_check_iid(self):
        """Blocks of an i.i.d. chain sit under the calibrated envelope."""
        kernel = chain.make_iid_chain([0.5, 0.5], [1.0, 0.0])
        blocksets = [
            depend.make_blocks(chain.sample_trajectory(kernel, "stationary", 199, seed=s), [1.0, 0.0], 5)
            for s in range(100)
        ]
        report = depend.block_covariance_check(blocksets, beta_nominal=1.0)
        assert report.block_size == 5
        np.testing.assert_array_equal(report.gaps, np.arange(1, 40))
        assert report.c_blocks >= 0
        assert report.domination

    def test_envelope_scales_with_block_size_squared(self):
        """Equal block sums labelled with twice the block size need a quarter of the constant."""
        rng = np.random.default_rng(5)
        sums = rng.normal(size=(100, 12))
        small = depend.block_covariance_check(
            [BlockSet(block_size=5, sums=row, n_observations=60) for row in sums], beta_nominal=1.0
        )
        large = depend.block_covariance_check(
            [BlockSet(block_size=10, sums=row, n_observations=120) for row in sums], beta_nominal=1.0
        )
        np.testing.assert_array_equal(small.cov_abs, large.cov_abs)
        assert small.c_blocks == pytest.approx(4 * large.c_blocks, rel=1e-12)
        assert small.domination == large.domination

    def test_mixed_block_sizes(self, two_state):
        """All block sets must share one block size."""
        blocksets = [
            depend.make_blocks(chain.sample_trajectory(two_state, 0, 50, seed=s), [1.0, 0.0], 5 if s else 4)
            for s in range(100)
        ]
        with pytest.raises(DimensionMismatch):
            depend.block_covariance_check(blocksets, beta_nominal=1.0)


class TestCoupling:
    """Tests for the maximal coupling."""

    def test_same_start_never_apart(self, random_kernel):
        """Chains started together stay together."""
        apart, taus = depend.couple_many(random_kernel, 2, 2, 25, range(20))
        assert not apart.any()
        assert taus == [0] * 20

    def test_meeting_is_permanent(self, renewal):
        """Once met, the chains move together."""
        for seed in range(10):
            path = depend.couple(renewal, 0, 30, 200, seed)
            assert path.apart[0]
            if path.tau is not None:
                assert not path.apart[path.tau:].any()
                assert path.apart[: path.tau].all()

    def test_invalid_start(self, two_state):
        """Start states must exist."""
        with pytest.raises(InvalidParameter):
            depend.couple_many(two_state, 0, 4, 10, [0])

    def test_two_state_coupling_matches_tv(self, two_state):
        """For two states P(x_t != y_t) is exactly 0.7^t, the coupling lower bound."""
        report = depend.coupling_study(two_state, 0, 1, 30, range(2000), ts=[1, 2, 3, 5, 8])
        np.testing.assert_allclose(report.lower_bound, 0.7 ** np.array([1, 2, 3, 5, 8]), atol=1e-12)
        assert np.all(np.abs(report.p_apart - report.lower_bound) <= 4 * report.stderr + 1e-3)
        assert report.dominates_lower_bound


class TestConcentration:
    """Tests for the blocked concentration check."""

    def test_block_size(self):
        """b = round(n^(1 / (beta + 1)))."""
        assert depend.concentration_block_size(1000, 1.0) == 32
        assert depend.concentration_block_size(5, 100.0) == 1

    def test_needs_seeds(self, two_state):
        """Tail probabilities need a thousand seeds."""
        with pytest.raises(InsufficientSeeds):
            depend.concentration_tail(two_state, [1.0, 0.0], 100, [0.1], range(10), beta_hat=2.0)

    def test_tail_dominated(self, two_state):
        """Held-out exceedance rates sit under the calibrated exponential bound."""
        report = depend.concentration_tail(
            two_state, [1.0, 0.0], 200, [0.05, 0.1, 0.2], list(range(1000)), beta_hat=5.0
        )
        assert report.n == 200
        assert report.c_beta > 0
        assert [row.epsilon for row in report.rows] == [0.05, 0.1, 0.2]
        assert all(0.0 <= row.bound <= 1.0 for row in report.rows)
        assert report.dominates
