"""Tests for the point-selection criteria: closed forms against sampling
oracles, estimator behavior on engineered models, and selection logic."""

import math

import numpy as np
import pytest
from scipy.special import ndtr, ndtri

from ccbo import acquisition as acq
from ccbo.gp import Matern52, condition_fixed, fit
from ccbo.problem import analytical_benchmark
from ccbo.projection import ZProcess
from ccbo.quasirandom import latin_hypercube, make_crn, sobol_sequence


@pytest.fixture(scope="module")
def problem():
    return analytical_benchmark()


@pytest.fixture(scope="module")
def crn(problem):
    return make_crn(problem, M=100, N=400, seed=7)


def benchmark_context(problem, crn, n_train=60, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n_train, 4))
    f = np.array([problem.objective(problem.x_from_unit(p[:2]),
                                    problem.u_from_unit(p[2:])) for p in X])
    g = np.array([problem.constraints[0](problem.x_from_unit(p[:2]),
                                         problem.u_from_unit(p[2:])) for p in X])
    ctx = acq.AcquisitionContext(z=ZProcess(fit(X, f), crn),
                                 constraint_gps=[fit(X, g)], crn=crn,
                                 alpha=problem.alpha)
    return ctx, X


def constant_constraint_gp(level, crn, spread=1e-7):
    """A constraint GP whose posterior mean is ~level everywhere with
    negligible variance (single observation, tiny process variance)."""
    kern = Matern52(np.full(4, 10.0), spread**2)
    return condition_fixed(kern, level, np.array([[0.5] * 4]),
                           np.array([level]))


class _ConstStatsGp:
    """Duck-typed stand-in whose posterior mean and sd are exact constants;
    lets boundary identities be checked without conditioning noise."""

    def __init__(self, mean, sd):
        self._m = float(mean)
        self._sd = float(sd)

    def mean_var_factor(self, P):
        n = P.shape[0]
        return (np.full(n, self._m), np.full(n, self._sd**2), None)

    def predict_mean(self, P):
        return np.full(np.atleast_2d(P).shape[0], self._m)

    def predict_var(self, P):
        return np.full(np.atleast_2d(P).shape[0], self._sd**2)


class TestExpectedImprovement:
    def test_symmetric_point_equals_normal_density(self):
        assert acq.expected_improvement(0.0, 1.0, 0.0) == pytest.approx(
            1.0 / math.sqrt(2.0 * math.pi), rel=1e-12)

    def test_deterministic_cases(self):
        assert acq.expected_improvement(-2.0, 0.0, 0.0) == 2.0
        assert acq.expected_improvement(1.0, 0.0, 0.0) == 0.0

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(5):
            m, sd = rng.uniform(-3, 3), rng.uniform(0.1, 5)
            z_min = rng.uniform(-3, 3)
            draws = rng.normal(m, sd, size=400_000)
            imp = np.maximum(z_min - draws, 0.0)
            se = imp.std(ddof=1) / math.sqrt(len(imp))
            assert acq.expected_improvement(m, sd, z_min) == pytest.approx(
                imp.mean(), abs=3 * se)

    def test_monotone_in_incumbent(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m, sd = rng.uniform(-2, 2), rng.uniform(0, 2)
            z1 = rng.uniform(-2, 2)
            z2 = z1 + rng.uniform(0, 2)
            assert acq.expected_improvement(m, sd, z2) >= acq.expected_improvement(
                m, sd, z1)

    def test_nonnegative_sweep(self):
        rng = np.random.default_rng(2)
        m = rng.uniform(-10, 10, 200)
        sd = rng.uniform(0, 5, 200)
        assert np.all(acq.expected_improvement(m, sd, 0.3) >= 0.0)


class TestVarianceOfImprovement:
    def test_degenerate_sd(self):
        assert acq.variance_of_improvement(1.3, 0.0, 0.0) == 0.0
        assert acq.variance_of_improvement(-5.0, 0.0, 0.0) == 0.0

    def test_symmetric_point_value(self):
        # exact arithmetic: EI = phi(0), VI = 1/2 - 1/(2 pi)
        expected = 0.5 - 1.0 / (2.0 * math.pi)
        assert acq.variance_of_improvement(0.0, 1.0, 0.0) == pytest.approx(
            expected, rel=1e-12)
        assert expected == pytest.approx(0.3408450569081046, rel=1e-12)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(33)
        for _ in range(5):
            m, sd = rng.uniform(-3, 3), rng.uniform(0.1, 5)
            z_min = rng.uniform(-3, 3)
            imp = np.maximum(z_min - rng.normal(m, sd, size=400_000), 0.0)
            v = imp.var(ddof=1)
            centered = (imp - imp.mean()) ** 2
            se = centered.std(ddof=1) / math.sqrt(len(imp))
            assert acq.variance_of_improvement(m, sd, z_min) == pytest.approx(
                v, abs=3 * se)

    def test_nonnegative_sweep(self):
        rng = np.random.default_rng(3)
        m = rng.uniform(-10, 10, 200)
        sd = rng.uniform(0, 5, 200)
        assert np.all(acq.variance_of_improvement(m, sd, -0.7) >= 0.0)


class TestProbFeasible:
    def test_certainly_feasible(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[constant_constraint_gp(-10.0, crn)],
            crn=crn, alpha=0.05)
        assert acq.prob_feasible_with_confidence(ctx, np.array([0.3, 0.3])) == 1.0

    def test_certainly_infeasible(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[constant_constraint_gp(10.0, crn)],
            crn=crn, alpha=0.05)
        assert acq.prob_feasible_with_confidence(ctx, np.array([0.3, 0.3])) == 0.0

    def test_alpha_monotonicity(self, problem, crn):
        ctx, X = benchmark_context(problem, crn, n_train=35, seed=4)
        rng = np.random.default_rng(8)
        for _ in range(3):
            x = rng.random(2)
            lo = acq.AcquisitionContext(z=ctx.z, constraint_gps=ctx.constraint_gps,
                                        crn=crn, alpha=0.01)
            hi = acq.AcquisitionContext(z=ctx.z, constraint_gps=ctx.constraint_gps,
                                        crn=crn, alpha=0.2)
            assert acq.prob_feasible_with_confidence(hi, x) >= \
                acq.prob_feasible_with_confidence(lo, x)

    def test_range_and_determinism(self, problem, crn):
        ctx, _ = benchmark_context(problem, crn, n_train=30, seed=5)
        x = np.array([0.62, 0.41])
        p1 = acq.prob_feasible_with_confidence(ctx, x)
        p2 = acq.prob_feasible_with_confidence(ctx, x)
        assert 0.0 <= p1 <= 1.0
        assert p1 == p2

    def test_dense_training_matches_exact_probability(self, problem):
        # oracle: Monte Carlo over the true constraint function
        crn = make_crn(problem, M=300, N=1000, seed=11)
        doe = latin_hypercube(4, 220, seed=3).points
        g = np.array([problem.constraints[0](problem.x_from_unit(p[:2]),
                                             problem.u_from_unit(p[2:]))
                      for p in doe])
        gp = fit(doe, g)
        ctx = acq.AcquisitionContext(z=_zprocess_stub(problem, crn),
                                     constraint_gps=[gp], crn=crn, alpha=0.05)
        u_mc = problem.u_from_unit(sobol_sequence(2, 20000, skip=1))
        rng = np.random.default_rng(14)
        for _ in range(3):
            x01 = rng.random(2)
            x = problem.x_from_unit(x01)
            exact = float(np.mean(
                problem.constraints[0](x[None, :], u_mc) <= 0.0))
            exact_ind = 1.0 if exact >= 0.95 else 0.0
            est = acq.prob_feasible_with_confidence(ctx, x01)
            assert abs(est - exact_ind) <= 0.05 or abs(exact - 0.95) < 0.02


class TestExpectedC:
    def test_certainly_feasible_gives_minus_alpha(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[constant_constraint_gp(-10.0, crn, spread=0.0)],
            crn=crn, alpha=0.05)
        assert acq.expected_c(ctx, np.array([0.5, 0.5])) == pytest.approx(-0.05)

    def test_certainly_infeasible_gives_one_minus_alpha(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[constant_constraint_gp(10.0, crn, spread=0.0)],
            crn=crn, alpha=0.05)
        assert acq.expected_c(ctx, np.array([0.5, 0.5])) == pytest.approx(0.95)

    def test_exact_boundary(self, problem, crn):
        level = -float(ndtri(0.95))  # Phi(-m) = 0.95 exactly
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(level, 1.0)], crn=crn, alpha=0.05)
        assert acq.expected_c(ctx, np.array([0.5, 0.5])) == pytest.approx(
            0.0, abs=1e-12)


class TestCurrentFeasibleMin:
    def test_single_feasible_candidate(self, problem, crn):
        ctx, X = benchmark_context(problem, crn, n_train=40, seed=6)
        ctx2 = acq.AcquisitionContext(
            z=ctx.z, constraint_gps=[constant_constraint_gp(-5.0, crn)],
            crn=crn, alpha=0.05)
        x = np.array([[0.2, 0.8]])
        z_min, x_at = acq.current_feasible_min(ctx2, x)
        assert z_min == pytest.approx(ctx.z.mean(x[0]), rel=1e-9)
        np.testing.assert_array_equal(x_at, x[0])

    def test_min_among_feasible(self, problem, crn):
        ctx, _ = benchmark_context(problem, crn, n_train=40, seed=6)
        ctx2 = acq.AcquisitionContext(
            z=ctx.z, constraint_gps=[constant_constraint_gp(-5.0, crn)],
            crn=crn, alpha=0.05)
        xs = np.array([[0.2, 0.8], [0.5, 0.5], [0.45, 0.52]])
        z_min, x_at = acq.current_feasible_min(ctx2, xs)
        means = ctx.z.mean_many(xs)
        assert z_min == pytest.approx(float(means.min()), rel=1e-9)
        np.testing.assert_array_equal(x_at, xs[int(np.argmin(means))])

    def test_infeasible_fallback_most_feasible(self, problem, crn):
        # two infeasible candidates: pick the one with the larger averaged
        # feasibility product (computed here directly as the oracle)
        ctx, X = benchmark_context(problem, crn, n_train=40, seed=9)
        xs = np.array([[0.9, 0.95], [0.1, 0.9]])
        ec = acq.expected_c_many(ctx, xs)
        if not np.all(ec > 0):  # engineer infeasibility via tight alpha
            ctx = acq.AcquisitionContext(z=ctx.z, constraint_gps=ctx.constraint_gps,
                                         crn=crn, alpha=1e-6)
            ec = acq.expected_c_many(ctx, xs)
        assert np.all(ec > 0)
        z_min, x_at = acq.current_feasible_min(ctx, xs)
        best = int(np.argmin(ec))
        np.testing.assert_array_equal(x_at, xs[best])
        assert z_min == pytest.approx(ctx.z.mean(xs[best]), rel=1e-9)

    def test_shift_invariance(self, problem, crn):
        ctx, _ = benchmark_context(problem, crn, n_train=40, seed=6)
        xs = np.array([[0.2, 0.8], [0.5, 0.5], [0.7, 0.3]])
        _, x_at = acq.current_feasible_min(ctx, xs)
        shifted = acq.AcquisitionContext(
            z=_ShiftedZ(ctx.z, 100.0), constraint_gps=ctx.constraint_gps,
            crn=crn, alpha=ctx.alpha)
        _, x_at2 = acq.current_feasible_min(shifted, xs)
        np.testing.assert_array_equal(x_at, x_at2)

    def test_empty_candidates_rejected(self, problem, crn):
        ctx, _ = benchmark_context(problem, crn, n_train=40, seed=6)
        with pytest.raises(ValueError):
            acq.current_feasible_min(ctx, np.empty((0, 2)))


class TestEfi:
    def test_zero_probability_kills_product(self, problem, crn):
        ctx, _ = benchmark_context(problem, crn, n_train=40, seed=6)
        blocked = acq.AcquisitionContext(
            z=ctx.z, constraint_gps=[constant_constraint_gp(10.0, crn)],
            crn=crn, alpha=0.05)
        blocked.z_min_feas = 1e9  # enormous improvement available
        assert acq.efi(blocked, np.array([0.5, 0.5])) == 0.0

    def test_no_variance_no_improvement(self, problem, crn):
        ctx, X = benchmark_context(problem, crn, n_train=40, seed=6)
        ctx.z_min_feas = -1e12  # far below any posterior mean
        x_on_data = X[0][:2]
        assert acq.efi(ctx, x_on_data) == 0.0

    def test_bounded_by_ei(self, problem, crn):
        ctx, X = benchmark_context(problem, crn, n_train=40, seed=6)
        x01 = np.random.default_rng(0).random((20, 2))
        ctx.z_min_feas, ctx.x_at_incumbent = acq.current_feasible_min(ctx, X[:, :2])
        for x in x01:
            m, sd = ctx.z.mean_and_sd(x)
            ei = acq.expected_improvement(m, sd, ctx.z_min_feas)
            assert acq.efi(ctx, x) <= ei + 1e-12


class TestEmpiricalQuantile:
    def test_constant_surface(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[constant_constraint_gp(3.25, crn, spread=0.0)],
            crn=crn, alpha=0.05)
        q = acq.empirical_quantile_constraint(ctx, np.array([0.4, 0.4]), 0)
        assert q == pytest.approx(3.25, abs=1e-9)

    def test_order_statistic_index(self, problem):
        # with M = 300 and alpha = 0.05 the quantile is the 285th ascending
        # order statistic; verify against a direct count
        crn = make_crn(problem, M=300, N=2, seed=2)
        ctx, _ = benchmark_context(problem, crn, n_train=40, seed=6)
        x = np.array([0.3, 0.6])
        q = acq.empirical_quantile_constraint(ctx, x, 0)
        means = ctx.constraint_gps[0].predict_mean(ctx.z.slice_points(x[None, :]))
        assert int(np.sum(means <= q)) >= 285
        assert q == np.sort(means)[284]

    def test_monotone_surface_matches_analytic_quantile(self, problem):
        # constraint mean rising linearly in u1: the (1-alpha) quantile of
        # the mean over U is analytic
        crn = make_crn(problem, M=300, N=2, seed=5)
        X = np.hstack([np.full((60, 2), 0.5),
                       latin_hypercube(2, 60, seed=8).points])
        vals = X[:, 2] * 2.0 - 1.0  # linear in u1 (unit scale)
        gp = fit(X, vals)
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn), constraint_gps=[gp],
            crn=crn, alpha=0.05)
        q = acq.empirical_quantile_constraint(ctx, np.array([0.5, 0.5]), 0)
        assert q == pytest.approx(0.9, abs=0.1)  # 95th pct of 2*U-1, U~U(0,1)


class TestDeviationNumber:
    def test_on_limit_state(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(0.0, 1.0)], crn=crn, alpha=0.05)
        assert acq.deviation_number(ctx, [0.5, 0.5], [0.5, 0.5]) == 0.0

    def test_simple_ratio(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(2.0, 1.0)], crn=crn, alpha=0.05)
        assert acq.deviation_number(ctx, [0.5, 0.5], [0.5, 0.5]) == pytest.approx(2.0)

    def test_min_across_constraints(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(3.0, 1.0), _ConstStatsGp(1.0, 2.0)],
            crn=crn, alpha=0.05)
        assert acq.deviation_number(ctx, [0.5, 0.5], [0.5, 0.5]) == pytest.approx(0.5)

    def test_zero_sd_sentinels(self, problem, crn):
        ctx = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(2.0, 0.0)], crn=crn, alpha=0.05)
        assert acq.deviation_number(ctx, [0.5, 0.5], [0.5, 0.5]) == math.inf
        ctx0 = acq.AcquisitionContext(
            z=_zprocess_stub(problem, crn),
            constraint_gps=[_ConstStatsGp(0.0, 0.0)], crn=crn, alpha=0.05)
        assert acq.deviation_number(ctx0, [0.5, 0.5], [0.5, 0.5]) == 0.0


class _ShiftedZ:
    """Projected process with a constant added to the mean (shift-invariance
    checks)."""

    def __init__(self, z, shift):
        self._z = z
        self.shift = shift

    def __getattr__(self, name):
        return getattr(self._z, name)

    def mean_many(self, X):
        return self._z.mean_many(X) + self.shift


def _zprocess_stub(problem, crn):
    """Minimal real ZProcess over an arbitrary smooth objective; used where
    a test only exercises the constraint side."""
    rng = np.random.default_rng(0)
    X = rng.random((8, 4))
    gp = condition_fixed(Matern52(np.full(4, 0.8), 1.0), 0.0, X,
                         rng.standard_normal(8))
    return ZProcess(gp, crn)
