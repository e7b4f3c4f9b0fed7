"""Gaussian-process regression over the joint design-uncertainty space:
anisotropic Matern-5/2 kernel with constant trend, profile-likelihood fitting,
posterior prediction, trajectory simulation at a design slice, and the
rank-one posterior update used by the look-ahead criteria."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .quasirandom import CrnSet, sobol_sequence

__all__ = [
    "Matern52",
    "GpPosterior",
    "TrajectoryEnsemble",
    "OneStepUpdate",
    "SliceSimulator",
    "GpFitError",
    "DegeneratePointError",
    "fit",
    "condition_fixed",
    "condition_with_lengthscales",
    "predict",
    "simulate_joint",
    "one_step_update",
    "log_marginal_likelihood",
]

SQRT5 = math.sqrt(5.0)

# Relative jitter ladder for the correlation-matrix factorization: noise-free
# interpolating GPs, so regularization starts tiny and escalates only when
# the factorization fails.
JITTER_START = 1e-8
JITTER_MAX = 1e-4

LOG_LS_BOUNDS = (math.log(0.05), math.log(10.0))


class GpFitError(RuntimeError):
    """Kernel matrix could not be factored even at the maximum jitter."""


class DegeneratePointError(ValueError):
    """A point with (numerically) zero prior variance was used where a
    positive variance is required."""


@dataclass(frozen=True)
class Matern52:
    """Anisotropic Matern-5/2 kernel: variance * (1 + a + a^2/3) exp(-a) with
    a = sqrt(5) * r and r the lengthscale-weighted Euclidean distance."""

    lengthscales: np.ndarray
    variance: float

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        if np.any(ls <= 0):
            raise ValueError("lengthscales must be strictly positive")
        if self.variance < 0:
            raise ValueError("variance must be nonnegative")
        object.__setattr__(self, "lengthscales", ls)

    def corr(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        """Correlation matrix between row sets A (n, D) and B (p, D)."""
        A = np.atleast_2d(A) / self.lengthscales
        B = np.atleast_2d(B) / self.lengthscales
        # in-place pipeline: these blocks dominate the runtime of every
        # estimator, so avoid temporaries
        sq = A @ B.T
        sq *= -2.0
        sq += np.einsum("ij,ij->i", A, A)[:, None]
        sq += np.einsum("ij,ij->i", B, B)[None, :]
        np.maximum(sq, 0.0, out=sq)
        np.sqrt(sq, out=sq)
        sq *= SQRT5  # now the scaled distance a
        poly = sq * sq
        poly /= 3.0
        poly += sq
        poly += 1.0
        np.negative(sq, out=sq)
        np.exp(sq, out=sq)
        poly *= sq
        return poly

    def __call__(self, A: np.ndarray, B: np.ndarray) -> np.ndarray:
        return self.variance * self.corr(A, B)


def _chol_with_jitter(R: np.ndarray, start: float = JITTER_START):
    """Lower Cholesky factor of R + jitter*I, escalating jitter tenfold up to
    JITTER_MAX. Returns (L, jitter_used)."""
    jitter = start
    eye = np.eye(R.shape[0])
    while jitter <= JITTER_MAX * 1.0000001:
        try:
            L = cholesky(R + jitter * eye, lower=True, check_finite=False)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GpFitError(
        f"covariance factorization failed up to relative jitter {JITTER_MAX:g}"
    )


@dataclass
class GpPosterior:
    """Conditioned GP: kernel with fitted hyperparameters, generalized
    least-squares constant trend, and the Cholesky factor of the regularized
    correlation matrix of the training inputs.

    All inputs live in unit-cube coordinates. `alpha` solves
    (R + jitter I) alpha = y - trend, so the posterior mean at P is
    trend + corr(P, X) @ alpha regardless of the process variance.
    """

    kernel: Matern52
    trend: float
    X: np.ndarray
    y: np.ndarray
    jitter: float
    L: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    log_likelihood: float = float("nan")

    @property
    def n_train(self) -> int:
        return self.X.shape[0]

    def corr_with_train(self, P: np.ndarray) -> np.ndarray:
        """(t, p) correlation block between training inputs and P."""
        return self.kernel.corr(self.X, np.atleast_2d(P))

    def v_factor(self, P: np.ndarray) -> np.ndarray:
        """L^{-1} corr(X, P); posterior correlation is corr(A,B) - V_A' V_B."""
        return solve_triangular(self.L, self.corr_with_train(P), lower=True, check_finite=False)

    def predict_mean(self, P: np.ndarray) -> np.ndarray:
        return self.trend + self.corr_with_train(P).T @ self.alpha

    def predict_var(self, P: np.ndarray) -> np.ndarray:
        """Pointwise posterior variance (diagonal), floored at zero."""
        V = self.v_factor(P)
        var = 1.0 - np.einsum("ij,ij->j", V, V)
        return self.kernel.variance * np.maximum(var, 0.0)

    def predict_cov(self, P: np.ndarray, P2: np.ndarray | None = None) -> np.ndarray:
        P = np.atleast_2d(P)
        Q = P if P2 is None else np.atleast_2d(P2)
        VP = self.v_factor(P)
        VQ = VP if P2 is None else self.v_factor(Q)
        return self.kernel.variance * (self.kernel.corr(P, Q) - VP.T @ VQ)

    def mean_var_factor(self, P: np.ndarray):
        """(mean, variance, V) at P from a single cross-correlation block;
        the building block behind every batched slice computation."""
        corr = self.corr_with_train(P)
        mean = self.trend + corr.T @ self.alpha
        V = solve_triangular(self.L, corr, lower=True, check_finite=False)
        var = self.kernel.variance * np.maximum(
            1.0 - np.einsum("ij,ij->j", V, V), 0.0)
        return mean, var, V


def log_marginal_likelihood(inputs: np.ndarray, outputs: np.ndarray,
                            log_lengthscales: np.ndarray) -> float:
    """Profile log marginal likelihood at the given log-lengthscales (trend
    and process variance concentrated out analytically)."""
    nll, *_ = _profile_nll(np.atleast_2d(inputs), np.asarray(outputs, float),
                           np.asarray(log_lengthscales, float))
    n = len(outputs)
    return -0.5 * (nll + n * math.log(2.0 * math.pi) + n)


def _profile_nll(X: np.ndarray, y: np.ndarray, log_ls: np.ndarray):
    """Negative profile log-likelihood (up to constants) plus the implied
    trend, variance, Cholesky factor and jitter."""
    kernel = Matern52(np.exp(log_ls), 1.0)
    R = kernel.corr(X, X)
    L, jitter = _chol_with_jitter(R)
    n = len(y)
    ones = np.ones(n)
    Ri_y = cho_solve((L, True), y, check_finite=False)
    Ri_1 = cho_solve((L, True), ones, check_finite=False)
    trend = float(ones @ Ri_y) / float(ones @ Ri_1)
    resid = y - trend
    s2 = float(resid @ cho_solve((L, True), resid, check_finite=False)) / n
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    nll = n * math.log(max(s2, 1e-300)) + logdet
    return nll, trend, s2, L, jitter


def fit(inputs: np.ndarray, outputs: np.ndarray, restarts: int = 5,
        maxfev_per_start: int = 200) -> GpPosterior:
    """Fit the GP by maximizing the profile log marginal likelihood over the
    log-lengthscales with a multi-start derivative-free search.

    Starts are the best of a fixed Sobol probe of the lengthscale box, each
    polished by bounded Powell; the trend and the process variance follow in
    closed form. Deterministic for fixed inputs.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(outputs, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise ValueError("inputs and outputs disagree in length")
    if X.shape[0] < 2:
        raise ValueError("at least two observations are required")
    D = X.shape[1]
    lo, hi = LOG_LS_BOUNDS

    def nll_only(log_ls):
        try:
            return _profile_nll(X, y, np.clip(log_ls, lo, hi))[0]
        except GpFitError:
            return np.inf

    n_probe = max(8, 4 * D)
    probes = lo + sobol_sequence(D, n_probe, skip=1) * (hi - lo)
    probes = np.vstack([probes, np.zeros(D)])  # unit lengthscales
    probe_vals = np.array([nll_only(p) for p in probes])
    if not np.any(np.isfinite(probe_vals)):
        raise GpFitError("likelihood evaluation failed at every probe")
    order = np.argsort(probe_vals)

    best_val, best_ls = np.inf, None
    for k in order[: max(1, restarts)]:
        res = minimize(
            nll_only, probes[k], method="Powell",
            bounds=[(lo, hi)] * D,
            options={"maxfev": maxfev_per_start, "xtol": 1e-3, "ftol": 1e-6},
        )
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_ls = res.fun, np.clip(res.x, lo, hi)
    if best_ls is None:
        best_ls = probes[order[0]]

    nll, trend, s2, L, jitter = _profile_nll(X, y, best_ls)
    alpha = cho_solve((L, True), y - trend, check_finite=False)
    n = len(y)
    ll = -0.5 * (nll + n * math.log(2.0 * math.pi) + n)
    return GpPosterior(
        kernel=Matern52(np.exp(best_ls), s2),
        trend=trend, X=X, y=y, jitter=jitter, L=L, alpha=alpha,
        log_likelihood=ll,
    )


def condition_fixed(kernel: Matern52, trend: float, inputs: np.ndarray,
                    outputs: np.ndarray,
                    jitter_start: float = JITTER_START) -> GpPosterior:
    """Condition on the data with every hyperparameter held fixed (kernel,
    variance and trend taken as given). This is plain Gaussian conditioning;
    it backs the re-conditioning oracles for the rank-one update formulas."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(outputs, dtype=float)
    R = kernel.corr(X, X)
    L, jitter = _chol_with_jitter(R, start=jitter_start)
    alpha = cho_solve((L, True), y - trend, check_finite=False)
    return GpPosterior(kernel=kernel, trend=trend, X=X, y=y, jitter=jitter,
                       L=L, alpha=alpha)


def condition_with_lengthscales(lengthscales: np.ndarray, inputs: np.ndarray,
                                outputs: np.ndarray) -> GpPosterior:
    """Condition on the data at fixed lengthscales (trend and variance still
    estimated in closed form); the driver's fallback when hyperparameter
    re-estimation fails."""
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(outputs, dtype=float)
    log_ls = np.log(np.asarray(lengthscales, dtype=float))
    nll, trend, s2, L, jitter = _profile_nll(X, y, log_ls)
    alpha = cho_solve((L, True), y - trend, check_finite=False)
    n = len(y)
    ll = -0.5 * (nll + n * math.log(2.0 * math.pi) + n)
    return GpPosterior(
        kernel=Matern52(np.exp(log_ls), s2),
        trend=trend, X=X, y=y, jitter=jitter, L=L, alpha=alpha,
        log_likelihood=ll,
    )


def predict(gp: GpPosterior, points: np.ndarray):
    """Posterior (means, covariance matrix) at the given points."""
    P = np.atleast_2d(points)
    return gp.predict_mean(P), gp.predict_cov(P)


# ---------------------------------------------------------------------------
# Trajectory simulation at a fixed design slice.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryEnsemble:
    """N joint realizations of a GP at the M slice points {(x, u_j)}; rows
    are trajectories, correlated across the u sample within each row."""

    values: np.ndarray
    x: np.ndarray


class SliceSimulator:
    """Draws posterior trajectories of one GP at design slices over the fixed
    CRN u sample.

    The prior correlation of a slice {(x, u_j)}_j does not depend on x (the
    design coordinates cancel inside the kernel distance), so its Cholesky
    factor and the product with the frozen normal block are computed once.
    Per design, the training-data downdate has rank at most t, and an exact
    symmetric square root of the posterior correlation is assembled from the
    eigendecomposition of a t x t matrix.
    """

    def __init__(self, gp: GpPosterior, crn: CrnSet, stream: int = 0):
        self.gp = gp
        self.crn = crn
        self.u_unit = crn.u_unit
        block = crn.normal_block_for(stream)
        kern_u = Matern52(gp.kernel.lengthscales[-self.u_unit.shape[1]:], 1.0)
        R_uu = kern_u.corr(self.u_unit, self.u_unit)
        self.L_u, _ = _chol_with_jitter(R_uu)
        self.block = block
        # the N-sized noise products run in single precision: their error is
        # orders of magnitude below the Monte Carlo noise of the estimators
        self._block32 = block.astype(np.float32)
        self._omega_lt32 = (block @ self.L_u.T).astype(np.float32)
        self._sigma = math.sqrt(gp.kernel.variance)

    def slice_points(self, x_unit: np.ndarray) -> np.ndarray:
        x_unit = np.atleast_1d(np.asarray(x_unit, dtype=float))
        M = self.u_unit.shape[0]
        return np.hstack([np.tile(x_unit, (M, 1)), self.u_unit])

    def simulate(self, x_unit: np.ndarray) -> np.ndarray:
        """(N, M) posterior realizations at the slice of `x_unit`."""
        P = self.slice_points(x_unit)
        mean, _, V = self.gp.mean_var_factor(P)
        return self.simulate_from(mean, V)

    def simulate_from(self, mean: np.ndarray, V: np.ndarray) -> np.ndarray:
        """Realizations given the slice's precomputed posterior mean and
        training-solve factor (columns of V correspond to the u sample)."""
        if self.gp.kernel.variance == 0.0:
            return np.tile(mean, (self.block.shape[0], 1))
        B = solve_triangular(self.L_u, V.T, lower=True, check_finite=False)   # (M, t)
        lam, U = np.linalg.eigh(B.T @ B)              # t x t
        lam = np.clip(lam, 0.0, 1.0)
        # directions below the cutoff move the covariance by < 1e-7 of the
        # process variance, far under the Monte Carlo resolution
        keep = lam > 1e-7 * max(float(lam[-1]), 1e-30)
        if not np.any(keep):
            return mean[None, :] + self._sigma * self._omega_lt32
        lam = lam[keep]
        V_eig = B @ (U[:, keep] / np.sqrt(lam))       # (M, k) orthonormal
        delta = 1.0 - np.sqrt(1.0 - lam)
        left = (self._block32 @ V_eig.astype(np.float32)) * delta.astype(np.float32)
        right = (self.L_u @ V_eig).T.astype(np.float32)          # (k, M)
        return mean[None, :] + self._sigma * (self._omega_lt32 - left @ right)


def simulate_joint(gp: GpPosterior, x_unit: np.ndarray, crn: CrnSet,
                   stream: int = 0) -> TrajectoryEnsemble:
    """N posterior realizations of `gp` at {(x, u_j)} over the CRN sample,
    driven by the frozen normal block of the given stream."""
    sim = SliceSimulator(gp, crn, stream=stream)
    return TrajectoryEnsemble(values=sim.simulate(x_unit),
                              x=np.atleast_1d(np.asarray(x_unit, float)))


# ---------------------------------------------------------------------------
# Rank-one posterior update for a not-yet-observed point.
# ---------------------------------------------------------------------------

class OneStepUpdate:
    """Evaluators for the posterior covariance after conditioning on one new
    point, and for the coefficient that maps the (still unknown) centered
    observation to the posterior-mean increment.

    The denominator includes the same diagonal regularization the full refit
    would apply, so the update reproduces re-conditioning exactly.
    """

    def __init__(self, gp: GpPosterior, new_point: np.ndarray):
        self.gp = gp
        self.new_point = np.atleast_1d(np.asarray(new_point, dtype=float))
        k_nn = float(gp.predict_var(self.new_point[None, :])[0])
        jitter_abs = gp.jitter * gp.kernel.variance
        if k_nn <= jitter_abs:
            raise DegeneratePointError(
                f"candidate has prior variance {k_nn:.3e} at or below the "
                f"jitter floor {jitter_abs:.3e}"
            )
        self.denom = k_nn + jitter_abs
        self._v_new = gp.v_factor(self.new_point[None, :])

    def cov_with_new(self, P: np.ndarray) -> np.ndarray:
        """Current posterior covariance vector k(P, new)."""
        P = np.atleast_2d(P)
        VP = self.gp.v_factor(P)
        corr = self.gp.kernel.corr(P, self.new_point[None, :])[:, 0]
        return self.gp.kernel.variance * (corr - VP.T @ self._v_new[:, 0])

    def mean_coefficient(self, P: np.ndarray) -> np.ndarray:
        """Coefficient of (y_new - m(new)) in the updated mean at P."""
        return self.cov_with_new(P) / self.denom

    def updated_cov(self, P: np.ndarray, Q: np.ndarray | None = None) -> np.ndarray:
        P = np.atleast_2d(P)
        Q2 = P if Q is None else np.atleast_2d(Q)
        kP = self.cov_with_new(P)
        kQ = kP if Q is None else self.cov_with_new(Q2)
        return self.gp.predict_cov(P, Q2) - np.outer(kP, kQ) / self.denom

    def updated_var(self, P: np.ndarray) -> np.ndarray:
        kP = self.cov_with_new(P)
        return np.maximum(self.gp.predict_var(P) - kP * kP / self.denom, 0.0)


def one_step_update(gp: GpPosterior, new_point: np.ndarray) -> OneStepUpdate:
    """Posterior update evaluators for one new observation point (no output
    value needed for the covariance; the mean enters via a coefficient)."""
    return OneStepUpdate(gp, new_point)


def dump_model(gp: GpPosterior, path) -> None:
    """Write hyperparameters and the training set to a JSON file."""
    payload = {
        "kernel": {
            "family": "matern52",
            "lengthscales": [repr(v) for v in gp.kernel.lengthscales],
            "variance": repr(gp.kernel.variance),
        },
        "trend": repr(gp.trend),
        "jitter": repr(gp.jitter),
        "log_likelihood": repr(gp.log_likelihood),
        "inputs": [[repr(v) for v in row] for row in gp.X],
        "outputs": [repr(v) for v in gp.y],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
