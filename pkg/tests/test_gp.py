"""Tests for the joint-space GP: kernel values, fitting, prediction,
trajectory simulation and the rank-one posterior update."""

import math

import numpy as np
import pytest

from ccbo.gp import (DegeneratePointError, GpFitError, Matern52,
                     condition_fixed, fit, log_marginal_likelihood,
                     one_step_update, predict, simulate_joint)
from ccbo.problem import analytical_benchmark
from ccbo.quasirandom import make_crn


def make_gp(n=30, dims=4, seed=0, fixed_ls=None):
    rng = np.random.default_rng(seed)
    X = rng.random((n, dims))
    y = (np.sin(3 * X[:, 0]) + X[:, 1 % dims] ** 2
         + 0.3 * np.cos(5 * X[:, -1]) + 0.1 * X.sum(axis=1))
    if fixed_ls is not None:
        return condition_fixed(Matern52(np.full(dims, fixed_ls), 1.0), 0.0, X, y), X, y
    return fit(X, y), X, y


class TestKernel:
    def test_value_at_one_lengthscale(self):
        # closed form at scaled distance 1: (1 + sqrt5 + 5/3) exp(-sqrt5)
        expected = (1.0 + math.sqrt(5.0) + 5.0 / 3.0) * math.exp(-math.sqrt(5.0))
        kern = Matern52(np.array([0.2]), 1.0)
        got = kern.corr(np.array([[0.0]]), np.array([[0.2]]))[0, 0]
        assert got == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.523994, abs=1e-6)

    def test_anisotropy(self):
        kern = Matern52(np.array([0.1, 10.0]), 2.0)
        near = kern(np.array([[0.0, 0.0]]), np.array([[0.0, 0.5]]))[0, 0]
        far = kern(np.array([[0.0, 0.0]]), np.array([[0.05, 0.0]]))[0, 0]
        assert near > far  # long lengthscale direction decays much slower

    def test_validation(self):
        with pytest.raises(ValueError):
            Matern52(np.array([0.0, 1.0]), 1.0)
        with pytest.raises(ValueError):
            Matern52(np.array([1.0]), -1.0)


class TestFit:
    def test_constant_outputs(self):
        rng = np.random.default_rng(1)
        X = rng.random((12, 2))
        gp = fit(X, np.full(12, 4.5))
        assert gp.kernel.variance < 1e-10
        m = gp.predict_mean(rng.random((5, 2)))
        np.testing.assert_allclose(m, 4.5, atol=1e-8)

    def test_two_point_interpolation(self):
        gp = fit(np.array([[0.0], [1.0]]), np.array([0.0, 1.0]))
        m = gp.predict_mean(np.array([[0.0], [1.0]]))
        np.testing.assert_allclose(m, [0.0, 1.0], atol=1e-5)

    def test_interpolates_training_data(self):
        gp, X, y = make_gp(n=25, seed=3)
        m = gp.predict_mean(X)
        scale = np.max(np.abs(y))
        assert np.max(np.abs(m - y)) < 1e-6 * max(scale, 1.0) * (
            gp.jitter / 1e-8)  # degrades with escalated jitter only

    def test_lengthscale_recovery(self):
        # simulate-and-refit oracle: draw from a known kernel, fit, compare
        true_ls, true_var = 0.3, 2.0
        kern = Matern52(np.array([true_ls]), true_var)
        errors = []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            X = rng.random((60, 1))
            K = kern(X, X) + 1e-10 * np.eye(60)
            y = np.linalg.cholesky(K) @ rng.standard_normal(60)
            gp = fit(X, y)
            errors.append(math.log(gp.kernel.lengthscales[0]) - math.log(true_ls))
        assert abs(np.median(errors)) < 0.5

    def test_fitted_likelihood_beats_random_probes(self):
        gp, X, y = make_gp(n=20, dims=2, seed=5)
        ll_fit = log_marginal_likelihood(X, y, np.log(gp.kernel.lengthscales))
        rng = np.random.default_rng(0)
        for _ in range(20):
            probe = rng.uniform(math.log(0.05), math.log(10.0), size=2)
            assert ll_fit >= log_marginal_likelihood(X, y, probe) - 1e-9

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            fit(np.array([[0.5]]), np.array([1.0]))


class TestPredict:
    def test_at_training_inputs(self):
        # base-jitter conditioning: interpolation holds to 1e-6 relative
        gp, X, y = make_gp(n=20, dims=3, seed=2, fixed_ls=0.4)
        assert gp.jitter == pytest.approx(1e-8)
        m, C = predict(gp, X)
        np.testing.assert_allclose(m, y, atol=1e-6 * max(np.max(np.abs(y)), 1.0))
        assert np.max(C.diagonal()) <= 10 * gp.jitter * gp.kernel.variance

    def test_prior_reversion_far_from_data(self):
        # data confined to a corner, short lengthscales: the opposite corner
        # is dozens of correlation lengths away
        rng = np.random.default_rng(4)
        X = 0.3 * rng.random((15, 2))
        y = rng.standard_normal(15)
        gp = condition_fixed(Matern52(np.full(2, 0.02), 1.3), 0.0, X, y)
        far = np.array([[0.95, 0.95]])
        m, C = predict(gp, far)
        assert m[0] == pytest.approx(gp.trend, abs=1e-6)
        assert C[0, 0] == pytest.approx(gp.kernel.variance, rel=1e-6)

    def test_cov_psd_on_random_sets(self):
        gp, _, _ = make_gp(n=25, dims=2, seed=7)
        rng = np.random.default_rng(11)
        for _ in range(5):
            P = rng.random((50, 2))
            _, C = predict(gp, P)
            eig = np.linalg.eigvalsh(0.5 * (C + C.T))
            assert eig.min() >= -1e-10 * max(gp.kernel.variance, 1.0)


@pytest.fixture(scope="module")
def sim_state():
    problem = analytical_benchmark()
    crn = make_crn(problem, M=80, N=600, seed=13)
    rng = np.random.default_rng(8)
    X = rng.random((30, 4))
    y = np.array([problem.constraints[0](problem.x_from_unit(p[:2]),
                                         problem.u_from_unit(p[2:]))
                  for p in X])
    return fit(X, y), crn


class TestSimulate:

    def test_column_means_match_predictions(self, sim_state):
        gp, crn = sim_state
        x = np.array([0.35, 0.6])
        ens = simulate_joint(gp, x, crn)
        P = np.hstack([np.tile(x, (crn.M, 1)), crn.u_unit])
        pm = gp.predict_mean(P)
        sd = np.sqrt(gp.predict_var(P))
        slack = 3.0 * sd / math.sqrt(crn.N) + 1e-9
        # a few of the M columns may exceed the pointwise band; bound the
        # worst normalized deviation loosely and the typical one tightly
        zscores = np.abs(ens.values.mean(axis=0) - pm) / np.maximum(slack / 3.0, 1e-12)
        assert np.median(zscores) < 2.0
        assert np.max(zscores) < 5.0

    def test_covariance_consistency(self, sim_state):
        gp, crn = sim_state
        x = np.array([0.1, 0.9])
        ens = simulate_joint(gp, x, crn)
        P = np.hstack([np.tile(x, (crn.M, 1)), crn.u_unit])
        C = gp.predict_cov(P)
        S = np.cov(ens.values.T)
        assert np.linalg.norm(S - C) < 5.0 * np.linalg.norm(C) / math.sqrt(crn.N)

    def test_determinism(self, sim_state):
        gp, crn = sim_state
        a = simulate_joint(gp, np.array([0.2, 0.2]), crn).values
        b = simulate_joint(gp, np.array([0.2, 0.2]), crn).values
        np.testing.assert_array_equal(a, b)

    def test_fully_observed_slice_collapses_to_mean(self):
        problem = analytical_benchmark()
        crn = make_crn(problem, M=12, N=50, seed=1)
        x0 = np.array([0.4, 0.7])
        X = np.hstack([np.tile(x0, (12, 1)), crn.u_unit])
        rng = np.random.default_rng(3)
        y = rng.standard_normal(12)
        gp = condition_fixed(Matern52(np.full(4, 0.5), 1.0), 0.0, X, y)
        ens = simulate_joint(gp, x0, crn)
        spread = np.max(np.abs(ens.values - gp.predict_mean(X)[None, :]))
        assert spread < 1e-3  # jitter-level residual only


class TestOneStepUpdate:
    def test_variance_vanishes_at_new_point(self):
        gp, X, y = make_gp(n=20, dims=3, seed=6)
        new = np.array([0.21, 0.47, 0.83])
        upd = one_step_update(gp, new)
        v = upd.updated_var(new[None, :])[0]
        assert v <= 2.0 * gp.jitter * gp.kernel.variance

    def test_matches_full_reconditioning(self):
        # ten random well-conditioned GP states (fixed kernels, base jitter)
        rng = np.random.default_rng(0)
        for case in range(10):
            n = int(rng.integers(8, 30))
            ls = float(rng.uniform(0.2, 0.8))
            gp, X, y = make_gp(n=n, dims=3, seed=200 + case, fixed_ls=ls)
            new = rng.random(3)
            try:
                upd = one_step_update(gp, new)
            except DegeneratePointError:
                continue
            y_fab = float(rng.standard_normal())
            refit = condition_fixed(gp.kernel, gp.trend,
                                    np.vstack([X, new]), np.append(y, y_fab),
                                    jitter_start=gp.jitter)
            P = rng.random((6, 3))
            v_upd = upd.updated_var(P)
            v_ref = refit.predict_var(P)
            np.testing.assert_allclose(v_upd, v_ref, rtol=1e-8,
                                       atol=1e-12 * gp.kernel.variance)
            coeff_upd = upd.mean_coefficient(P)
            denom = y_fab - gp.predict_mean(new[None, :])[0]
            coeff_ref = (refit.predict_mean(P) - gp.predict_mean(P)) / denom
            np.testing.assert_allclose(coeff_upd, coeff_ref, rtol=1e-8,
                                       atol=1e-12)

    def test_far_point_leaves_variance_unchanged(self):
        gp, X, y = make_gp(n=10, dims=2, seed=9, fixed_ls=0.02)
        upd = one_step_update(gp, np.array([0.95, 0.95]))
        P = np.array([[0.02, 0.02], [0.05, 0.1]])
        np.testing.assert_allclose(upd.updated_var(P), gp.predict_var(P),
                                   atol=1e-10)

    def test_variance_never_increases(self):
        gp, X, y = make_gp(n=15, dims=2, seed=10)
        rng = np.random.default_rng(2)
        upd = one_step_update(gp, rng.random(2))
        P = rng.random((40, 2))
        assert np.all(upd.updated_var(P) <= gp.predict_var(P) + 1e-12)

    def test_degenerate_point_rejected(self):
        gp, X, y = make_gp(n=12, dims=2, seed=11)
        with pytest.raises(DegeneratePointError):
            one_step_update(gp, X[3])


class TestJitterEscalation:
    def test_near_duplicate_inputs_still_factorizable(self):
        X = np.array([[0.5, 0.5], [0.5 + 1e-8, 0.5], [0.1, 0.9], [0.9, 0.1]])
        y = np.array([1.0, 1.0, 2.0, 3.0])
        gp = condition_fixed(Matern52(np.array([1.0, 1.0]), 1.0), 0.0, X, y)
        assert gp.jitter >= 1e-8

    def test_unfactorizable_raises(self):
        # an indefinite matrix stays indefinite across the whole jitter
        # ladder, so the escalation must give up with the model error
        from ccbo.gp import _chol_with_jitter
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # eigenvalues 3 and -1
        with pytest.raises(GpFitError):
            _chol_with_jitter(bad)
