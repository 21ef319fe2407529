"""Tests for fixed points and the martingale/remainder decomposition."""

import numpy as np
import pytest

from shared.types import FeatureMap, FixedPointMethod, StepSchedule
from tdmix import approx, chain, decomp, seeding, td
from tdmix.errors import InsufficientSeeds, InvalidParameter, MissingStepData, SingularSystem


@pytest.fixture
def theta_star(random_kernel, tabular_model):
    return decomp.linear_fixed_point(random_kernel, tabular_model.features, 0.9).theta_star


@pytest.fixture
def histories(random_kernel, tabular_model, schedule):
    """Thirty short tabular runs from the stationary law."""
    return [
        td.run_td(random_kernel, tabular_model, schedule, 0.9, 200, seed=seed, start="stationary")
        for seed in range(30)
    ]


class TestFixedPoint:
    """Tests for the projected Bellman fixed point."""

    def test_tabular_fixed_point_is_value_function(self, random_kernel, tabular_model):
        """With tabular features theta* solves v = r + discount P v."""
        fixed = decomp.linear_fixed_point(random_kernel, tabular_model.features, 0.9)
        v = np.linalg.solve(np.eye(5) - 0.9 * random_kernel.P, random_kernel.rewards)
        np.testing.assert_allclose(fixed.theta_star, v, atol=1e-10)
        assert fixed.method == FixedPointMethod.DIRECT_SOLVE
        assert fixed.residual < 1e-10

    def test_expected_update_vanishes(self, random_kernel, tabular_model, theta_star):
        """The mean TD field is zero at theta*."""
        model = approx.with_parameters(tabular_model, theta_star)
        np.testing.assert_allclose(decomp.expected_update(random_kernel, model, 0.9), 0.0, atol=1e-10)

    def test_expected_update_matches_sampling(self, random_kernel, relu_net):
        """The exact mean field agrees with an average of delta * grad over sampled transitions."""
        rng = seeding.generator(21)
        pi = chain.stationary_distribution(random_kernel)
        n = 20_000
        states = rng.choice(random_kernel.n_states, size=n, p=pi)
        cumulative = np.cumsum(random_kernel.P[states], axis=1)
        next_states = np.minimum((cumulative < rng.random((n, 1))).sum(axis=1), random_kernel.n_states - 1)
        v = approx.values(relu_net)
        grads = np.stack([approx.grad(relu_net, s) for s in range(random_kernel.n_states)])
        deltas = random_kernel.rewards[states] + 0.9 * v[next_states] - v[states]
        samples = deltas[:, None] * grads[states]

        mean = samples.mean(axis=0)
        stderr = samples.std(axis=0, ddof=1) / np.sqrt(n)
        exact = decomp.expected_update(random_kernel, relu_net, 0.9)
        assert np.all(np.abs(mean - exact) <= 4 * stderr + 1e-12)

    def test_singular_features(self, random_kernel):
        """Rank-deficient features have no unique fixed point."""
        phi = np.ones((5, 2)) / np.sqrt(2)
        with pytest.raises(SingularSystem):
            decomp.linear_fixed_point(random_kernel, FeatureMap(phi=phi), 0.9)

    def test_conditional_mean(self, two_state):
        """E[delta | s] for the zero model is the reward."""
        model = approx.make_linear_model(approx.tabular_features(2))
        np.testing.assert_allclose(decomp.conditional_td_mean(two_state, model, 0.9), [1.0, 0.0])

    def test_nonlinear_reference(self, random_kernel, relu_net):
        """The long-run reference point reports its own mean-update residual."""
        fixed = decomp.nonlinear_fixed_point(
            random_kernel, relu_net, StepSchedule(c_alpha=0.5, eta=0.8), 0.5, 1000, seed=1
        )
        assert fixed.method == FixedPointMethod.LONG_RUN_AVERAGE
        assert fixed.theta_star.shape == (approx.n_parameters(relu_net),)
        reference = approx.with_parameters(relu_net, fixed.theta_star)
        expected = np.linalg.norm(decomp.expected_update(random_kernel, reference, 0.5))
        assert fixed.residual == pytest.approx(expected)

    def test_nonlinear_reference_averages_tail(self, random_kernel, relu_net):
        """theta* is the mean of the last half of the iterates, not the final one."""
        schedule = StepSchedule(c_alpha=0.5, eta=0.8)
        fixed = decomp.nonlinear_fixed_point(random_kernel, relu_net, schedule, 0.5, 300, seed=4)
        history = td.run_td(
            random_kernel, relu_net, schedule, 0.5, 300, seed=4, checkpoint_every=1, start="stationary"
        )
        np.testing.assert_allclose(fixed.theta_star, history.thetas[151:].mean(axis=0), rtol=1e-10, atol=1e-12)
        assert not np.allclose(fixed.theta_star, history.thetas[-1])

    def test_nonlinear_reference_tail_range(self, random_kernel, relu_net):
        """The averaged share must lie in (0, 1]."""
        with pytest.raises(InvalidParameter):
            decomp.nonlinear_fixed_point(
                random_kernel, relu_net, StepSchedule(c_alpha=0.5, eta=0.8), 0.5, 100, seed=1, tail=0.0
            )


class TestDecompose:
    """Tests for the error decomposition."""

    def test_reconstruction(self, random_kernel, histories, theta_star):
        """theta_0 + M_t + R_t - theta* equals the error at every checkpoint."""
        decomposition = decomp.decompose(histories[0], random_kernel, theta_star)
        assert decomp.reconstruction_error(decomposition) < 1e-10
        np.testing.assert_allclose(decomposition.martingale[0], 0.0)

    def test_increments_sum_to_martingale(self, random_kernel, histories, theta_star):
        """M_T is the sum of all increments."""
        decomposition = decomp.decompose(histories[0], random_kernel, theta_star)
        np.testing.assert_allclose(
            decomposition.martingale[-1], decomposition.increments.sum(axis=0), atol=1e-12
        )

    def test_relu_reconstruction(self, random_kernel, relu_net, schedule):
        """The split holds for ReLU runs too."""
        history = td.run_td(random_kernel, relu_net, schedule, 0.9, 150, seed=2)
        theta_star = approx.parameters(relu_net)
        decomposition = decomp.decompose(history, random_kernel, theta_star)
        assert decomp.reconstruction_error(decomposition) < 1e-10

    def test_needs_stream(self, random_kernel, tabular_model, schedule, theta_star):
        """A history without the step stream cannot be decomposed."""
        history = td.run_td(random_kernel, tabular_model, schedule, 0.9, 50, seed=0, record_stream=False)
        with pytest.raises(MissingStepData):
            decomp.decompose(history, random_kernel, theta_star)

    def test_frozen_run_is_all_zero(self, random_kernel, tabular_model, schedule, theta_star):
        """With alpha = 0 both parts vanish."""
        history = td.run_td(random_kernel, tabular_model, schedule, 0.9, 60, seed=0, frozen=True)
        decomposition = decomp.decompose(history, random_kernel, theta_star)
        np.testing.assert_array_equal(decomposition.martingale, 0.0)
        np.testing.assert_array_equal(decomposition.remainder, 0.0)


class TestMartingaleChecks:
    """Tests for the martingale-difference diagnostics."""

    def test_bin_test_passes(self, random_kernel, histories, theta_star):
        """Increments average to zero per state and time bin."""
        decompositions = [decomp.decompose(h, random_kernel, theta_star) for h in histories]
        report = decomp.martingale_bin_test(decompositions)
        assert report.n_bins > 0
        assert report.passed

    def test_variance_curve(self, random_kernel, histories, theta_star):
        """E||M_t||^2 starts at zero, grows, and carries a bootstrap interval."""
        decompositions = [decomp.decompose(h, random_kernel, theta_star) for h in histories]
        curve = decomp.martingale_variance_curve(decompositions)
        assert curve.value[0] == 0.0
        assert curve.value[-1] > 0.0
        assert np.all(curve.ci_low <= curve.value + 1e-12)
        assert np.all(curve.value <= curve.ci_high + 1e-12)

    def test_variance_needs_seeds(self, random_kernel, histories, theta_star):
        """Fewer than thirty seeds are refused."""
        decompositions = [decomp.decompose(h, random_kernel, theta_star) for h in histories[:5]]
        with pytest.raises(InsufficientSeeds):
            decomp.martingale_variance_curve(decompositions)

    def test_orthogonality(self, random_kernel, histories, theta_star):
        """Distinct increments are uncorrelated across seeds."""
        decompositions = [decomp.decompose(h, random_kernel, theta_star) for h in histories]
        report = decomp.increment_orthogonality(decompositions, pairs=[(0, 1), (0, 9), (9, 99)])
        assert len(report.z_scores) == 3
        assert report.passed

    def test_default_pairs(self):
        """Default pairs stay inside the horizon."""
        assert decomp.default_step_pairs(200) == [(0, 1), (0, 9), (9, 99)]


class TestMoments:
    """Tests for moment curves."""

    def test_moment_order(self, histories, theta_star):
        """Only p = 2 and p = 4 are supported and the fourth moment dominates the second."""
        second = decomp.moment_curve(histories, theta_star, p=2)
        fourth = decomp.moment_curve(histories, theta_star, p=4)
        assert np.all(fourth.value >= second.value - 1e-12)
        with pytest.raises(InvalidParameter):
            decomp.moment_curve(histories, theta_star, p=3)


class TestJacobian:
    """Tests for the update Jacobian."""

    def test_linear_jacobian(self, random_kernel, tabular_model, theta_star):
        """For linear models the Jacobian is A = Phi^T D (Phi - discount P Phi)."""
        model = approx.with_parameters(tabular_model, theta_star)
        estimate = decomp.estimate_update_jacobian(random_kernel, model, 0.9)
        A, _ = decomp.linear_system(random_kernel, tabular_model.features, 0.9)
        np.testing.assert_allclose(estimate.H, A, atol=1e-7)
        assert estimate.positive_definite

    def test_remainder_report(self, renewal):
        """The remainder exponent is compared with both candidates."""
        model = approx.make_linear_model(approx.tabular_features(renewal.n_states))
        theta_star = decomp.linear_fixed_point(renewal, model.features, 0.5).theta_star
        schedule = StepSchedule(c_alpha=1.0, eta=0.8)
        history = td.run_td(renewal, model, schedule, 0.5, 3000, seed=0, start="stationary")
        decomposition = decomp.decompose(history, renewal, theta_star)
        report = decomp.remainder_exponent_report([decomposition], 1.0, 0.8, window=(100, None))
        assert report is not None
        assert report.half_holder == 0.5
        assert report.eta_holder == pytest.approx(0.8)
        assert report.closer in ("half-holder", "eta-holder")
