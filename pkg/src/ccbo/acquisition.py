"""Point-selection criteria over the design space: expected improvement and
its variance, feasibility probabilities under the constraint GPs, the
feasibility-weighted acquisition, the current feasible minimum, empirical
quantiles and deviation numbers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .gp import GpPosterior, SliceSimulator
from .projection import ZProcess
from .quasirandom import CrnSet

__all__ = [
    "AcquisitionContext",
    "expected_improvement",
    "variance_of_improvement",
    "prob_feasible_with_confidence",
    "expected_c",
    "current_feasible_min",
    "efi",
    "empirical_quantile_constraint",
    "deviation_number",
    "norm_pdf",
]

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def norm_pdf(x):
    return INV_SQRT_2PI * np.exp(-0.5 * np.square(x))


def expected_improvement(m, sd, z_min):
    """Closed-form mean of (z_min - Z)^+ for Z ~ N(m, sd^2); the sd = 0 limit
    is the deterministic improvement max(z_min - m, 0)."""
    m = np.asarray(m, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    diff = z_min - m
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sd > 0, diff / np.where(sd > 0, sd, 1.0), 0.0)
        ei = np.where(sd > 0, diff * ndtr(u) + sd * norm_pdf(u),
                      np.maximum(diff, 0.0))
    out = np.maximum(ei, 0.0)
    return float(out) if out.ndim == 0 else out


def variance_of_improvement(m, sd, z_min):
    """Closed-form variance of (z_min - Z)^+ for Z ~ N(m, sd^2):
    EI*(z_min - m - EI) + sd^2 * Phi((z_min - m)/sd); zero when sd = 0."""
    m = np.asarray(m, dtype=float)
    sd = np.asarray(sd, dtype=float)
    if np.any(sd < 0):
        raise ValueError("sd must be nonnegative")
    diff = z_min - m
    ei = expected_improvement(m, sd, z_min)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sd > 0, diff / np.where(sd > 0, sd, 1.0), 0.0)
        vi = np.where(sd > 0, ei * (diff - ei) + sd * sd * ndtr(u), 0.0)
    out = np.maximum(vi, 0.0)
    return float(out) if out.ndim == 0 else out


def _feasibility_product(means: np.ndarray, sds: np.ndarray) -> np.ndarray:
    """prod_i Phi(-m_i / sd_i) along the first axis, with sd = 0 resolved as
    the indicator limit of the Gaussian CDF (1 below zero, 1/2 at zero)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sds > 0, -means / np.where(sds > 0, sds, 1.0), 0.0)
        probs = np.where(
            sds > 0, ndtr(ratio),
            np.where(means < 0, 1.0, np.where(means == 0, 0.5, 0.0)),
        )
    return np.prod(probs, axis=0)


@dataclass
class AcquisitionContext:
    """Per-iteration state shared by the selection criteria: the projected
    objective process, the constraint GPs with their trajectory simulators,
    the frozen CRN sample, and the incumbent once computed."""

    z: ZProcess
    constraint_gps: list
    crn: CrnSet
    alpha: float
    z_min_feas: float = math.nan
    x_at_incumbent: np.ndarray | None = None
    _simulators: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0,1)")

    @property
    def simulators(self) -> list[SliceSimulator]:
        """One trajectory simulator per constraint, on independent normal
        streams so ensembles are independent across constraints."""
        if not self._simulators:
            self._simulators = [
                SliceSimulator(gp, self.crn, stream=i)
                for i, gp in enumerate(self.constraint_gps)
            ]
        return self._simulators

    def constraint_stats(self, X_unit: np.ndarray):
        """Posterior means and standard deviations of every constraint GP on
        the design slices of X_unit; shapes (l, B, M)."""
        X_unit = np.atleast_2d(X_unit)
        B = X_unit.shape[0]
        P = self.z.slice_points(X_unit)
        means = np.empty((len(self.constraint_gps), B, self.z.M))
        sds = np.empty_like(means)
        for i, gp in enumerate(self.constraint_gps):
            m, var, _ = gp.mean_var_factor(P)
            means[i] = m.reshape(B, self.z.M)
            sds[i] = np.sqrt(var).reshape(B, self.z.M)
        return means, sds


def prob_feasible_with_confidence(ctx: AcquisitionContext, x_unit) -> float:
    """Trajectory estimate of the probability that the modelled constraint
    functional is nonpositive at x: the share of joint GP realizations whose
    within-sample feasible fraction reaches 1 - alpha."""
    x_unit = np.atleast_1d(np.asarray(x_unit, dtype=float))
    return float(prob_feasible_many(ctx, x_unit[None, :])[0])


def prob_feasible_many(ctx: AcquisitionContext, X_unit: np.ndarray) -> np.ndarray:
    """Batched trajectory estimator: one cross-correlation block and solve
    per constraint for the whole batch, then per-design simulation."""
    X_unit = np.atleast_2d(np.asarray(X_unit, dtype=float))
    B = X_unit.shape[0]
    M = ctx.z.M
    P = ctx.z.slice_points(X_unit)
    threshold = 1.0 - ctx.alpha
    stats = [sim.gp.mean_var_factor(P) for sim in ctx.simulators]
    out = np.empty(B)
    for b in range(B):
        sl = slice(b * M, (b + 1) * M)
        all_ok = None
        for sim, (mean, _, V) in zip(ctx.simulators, stats):
            ok = sim.simulate_from(mean[sl], V[:, sl]) <= 0.0
            all_ok = ok if all_ok is None else (all_ok & ok)
        out[b] = float(np.mean(all_ok.mean(axis=1) >= threshold))
    return out


def expected_c_many(ctx: AcquisitionContext, X_unit: np.ndarray) -> np.ndarray:
    """Vectorized mean of the constraint functional over a batch of designs:
    1 - alpha minus the quadrature of the per-point feasibility product."""
    means, sds = ctx.constraint_stats(X_unit)
    prod = _feasibility_product(means, sds)  # (B, M)
    return 1.0 - ctx.alpha - prod.mean(axis=1)


def expected_c(ctx: AcquisitionContext, x_unit) -> float:
    return float(expected_c_many(ctx, np.atleast_2d(x_unit))[0])


def current_feasible_min(ctx: AcquisitionContext, candidate_xs_unit: np.ndarray):
    """Incumbent value and location: the smallest projected mean among
    candidates whose constraint functional is nonpositive in expectation.
    With no such candidate, falls back to the most feasible point in
    expectation. Returns (z_min_feas, x_at)."""
    X = np.atleast_2d(np.asarray(candidate_xs_unit, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("candidate set must be nonempty")
    ec = expected_c_many(ctx, X)
    m_z = ctx.z.mean_many(X)
    feasible = ec <= 0.0
    if np.any(feasible):
        idx = int(np.argmin(np.where(feasible, m_z, np.inf)))
    else:
        idx = int(np.argmin(ec))  # largest feasibility product
    return float(m_z[idx]), X[idx]


def efi(ctx: AcquisitionContext, x_unit) -> float:
    """Expected improvement of the projected process at x, weighted by the
    trajectory estimate of constraint-functional feasibility."""
    if math.isnan(ctx.z_min_feas):
        raise ValueError("z_min_feas has not been set on the context")
    x_unit = np.atleast_1d(np.asarray(x_unit, dtype=float))
    m, sd = ctx.z.mean_and_sd(x_unit)
    ei = expected_improvement(m, sd, ctx.z_min_feas)
    if ei == 0.0:
        return 0.0
    return ei * prob_feasible_with_confidence(ctx, x_unit)


def empirical_quantile_constraint(ctx: AcquisitionContext, x_unit,
                                  i: int) -> float:
    """(1 - alpha)-quantile of the i-th constraint's posterior mean over the
    CRN u sample: the ceil((1-alpha) M)-th ascending order statistic."""
    x_unit = np.atleast_2d(np.asarray(x_unit, dtype=float))
    gp = ctx.constraint_gps[i]
    vals = np.sort(gp.predict_mean(ctx.z.slice_points(x_unit)))
    M = vals.size
    rank = int(math.ceil((1.0 - ctx.alpha) * M))
    return float(vals[min(max(rank, 1), M) - 1])


def deviation_number(ctx: AcquisitionContext, x_unit, u_unit) -> float:
    """Smallest |posterior mean| / posterior sd across the constraint GPs at
    one joint point; small values flag limit-state proximity or large model
    uncertainty. A zero sd yields 0 on the limit state and +inf otherwise."""
    point = np.concatenate([np.atleast_1d(np.asarray(x_unit, float)),
                            np.atleast_1d(np.asarray(u_unit, float))])[None, :]
    best = math.inf
    for gp in ctx.constraint_gps:
        m = float(gp.predict_mean(point)[0])
        sd = math.sqrt(float(gp.predict_var(point)[0]))
        if sd > 0.0:
            val = abs(m) / sd
        else:
            val = 0.0 if m == 0.0 else math.inf
        best = min(best, val)
    return best
