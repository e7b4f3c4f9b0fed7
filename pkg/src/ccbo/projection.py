"""The design-space process obtained by averaging the joint-space objective
GP over the uncertainty distribution, and the Gaussian law of its
one-step-ahead mean under a pending observation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gp import DegeneratePointError, GpPosterior, OneStepUpdate
from .quasirandom import CrnSet

__all__ = ["ZProcess", "UpdatedMeanLaw", "z_mean", "z_cov", "updated_mean_law"]


@dataclass(frozen=True)
class UpdatedMeanLaw:
    """Gaussian law of the one-step-ahead projected mean at a target design:
    centred at the current projected mean, with standard deviation set by the
    u-averaged posterior covariance with the candidate point."""

    mean: float
    sd: float


class ZProcess:
    """Projection of the objective GP onto the design space.

    Means and covariances are the u-integrals of the joint GP against the
    uncertainty density, evaluated with the frozen M-point quadrature of the
    CRN sample (equal weights 1/M), so every estimator in the toolkit shares
    one integration rule. The projected diagonal is floored at zero where
    quadrature roundoff produces small negatives.
    """

    def __init__(self, gp: GpPosterior, crn: CrnSet):
        self.gp = gp
        self.crn = crn
        self.u_unit = crn.u_unit
        self.M = crn.M
        kern_u = type(gp.kernel)(gp.kernel.lengthscales[-self.u_unit.shape[1]:], 1.0)
        self._mean_R_uu = float(np.mean(kern_u.corr(self.u_unit, self.u_unit)))

    # -- slice helpers -----------------------------------------------------
    def slice_points(self, X_unit: np.ndarray) -> np.ndarray:
        """Joint points {(x_b, u_j)} for each row x_b, stacked (B*M, d+m)."""
        X_unit = np.atleast_2d(np.asarray(X_unit, dtype=float))
        B = X_unit.shape[0]
        xs = np.repeat(X_unit, self.M, axis=0)
        us = np.tile(self.u_unit, (B, 1))
        return np.hstack([xs, us])

    def _vbar(self, X_unit: np.ndarray) -> np.ndarray:
        """(t, B) columns are the quadrature averages of the training-solve
        factor over each design's slice."""
        X_unit = np.atleast_2d(X_unit)
        V = self.gp.v_factor(self.slice_points(X_unit))  # (t, B*M)
        return V.reshape(self.gp.n_train, X_unit.shape[0], self.M).mean(axis=2)

    # -- projected mean and covariance --------------------------------------
    def mean_var_many(self, X_unit: np.ndarray):
        """Projected means and variances for a batch of designs, sharing one
        cross-correlation block per batch."""
        X_unit = np.atleast_2d(X_unit)
        B = X_unit.shape[0]
        m, _, V = self.gp.mean_var_factor(self.slice_points(X_unit))
        means = m.reshape(B, self.M).mean(axis=1)
        vbar = V.reshape(self.gp.n_train, B, self.M).mean(axis=2)
        var = self.gp.kernel.variance * (self._mean_R_uu - np.sum(vbar * vbar, axis=0))
        return means, np.maximum(var, 0.0)

    def mean_many(self, X_unit: np.ndarray) -> np.ndarray:
        X_unit = np.atleast_2d(X_unit)
        m = self.gp.predict_mean(self.slice_points(X_unit))
        return m.reshape(X_unit.shape[0], self.M).mean(axis=1)

    def mean(self, x_unit: np.ndarray) -> float:
        return float(self.mean_many(np.atleast_2d(x_unit))[0])

    def var_many(self, X_unit: np.ndarray) -> np.ndarray:
        vbar = self._vbar(X_unit)
        var = self.gp.kernel.variance * (self._mean_R_uu - np.sum(vbar * vbar, axis=0))
        return np.maximum(var, 0.0)

    def var(self, x_unit: np.ndarray) -> float:
        return float(self.var_many(np.atleast_2d(x_unit))[0])

    def sd(self, x_unit: np.ndarray) -> float:
        return math.sqrt(self.var(x_unit))

    def mean_and_sd(self, x_unit: np.ndarray):
        means, var = self.mean_var_many(np.atleast_2d(x_unit))
        return float(means[0]), math.sqrt(float(var[0]))

    def cov(self, x_unit: np.ndarray, x2_unit: np.ndarray) -> float:
        """Full double quadrature of the posterior covariance between the two
        design slices (the diagonal shortcut only applies when x == x2).
        Arguments are ordered canonically so cov(x, x2) == cov(x2, x) exactly
        (identical summation order)."""
        a = np.atleast_1d(np.asarray(x_unit, dtype=float))
        b = np.atleast_1d(np.asarray(x2_unit, dtype=float))
        if tuple(b) < tuple(a):
            a, b = b, a
        x_unit, x2_unit = a, b
        P = self.slice_points(np.atleast_2d(x_unit))
        Q = self.slice_points(np.atleast_2d(x2_unit))
        prior = float(np.mean(self.gp.kernel.corr(P, Q)))
        vb1 = self._vbar(np.atleast_2d(x_unit))[:, 0]
        vb2 = self._vbar(np.atleast_2d(x2_unit))[:, 0]
        return self.gp.kernel.variance * (prior - float(vb1 @ vb2))

    # -- one-step-ahead law --------------------------------------------------
    def slice_cov_with(self, x_unit: np.ndarray, update: OneStepUpdate) -> np.ndarray:
        """Posterior covariance vector between the slice of x and the
        candidate point of `update` (length M)."""
        return update.cov_with_new(self.slice_points(np.atleast_2d(x_unit)))

    def updated_mean_law(self, x_targ_unit: np.ndarray,
                         candidate_unit: np.ndarray) -> UpdatedMeanLaw:
        """Law of the projected mean at `x_targ` after observing the (still
        unknown) value at `candidate`. Raises DegeneratePointError when the
        candidate has no posterior variance left."""
        update = OneStepUpdate(self.gp, candidate_unit)
        return self.updated_mean_law_from(x_targ_unit, update)

    def updated_mean_law_from(self, x_targ_unit: np.ndarray,
                              update: OneStepUpdate) -> UpdatedMeanLaw:
        num = float(np.mean(self.slice_cov_with(x_targ_unit, update)))
        return UpdatedMeanLaw(
            mean=self.mean(x_targ_unit),
            sd=abs(num) / math.sqrt(update.denom),
        )

    def updated_var(self, x_targ_unit: np.ndarray, update: OneStepUpdate) -> float:
        """One-step-ahead projected variance at x_targ given the candidate of
        `update`; deterministic (does not depend on the observed value) and
        equal to the current variance minus the law variance under the shared
        quadrature rule."""
        num = float(np.mean(self.slice_cov_with(x_targ_unit, update)))
        return max(self.var(x_targ_unit) - num * num / update.denom, 0.0)


def z_mean(z: ZProcess, x_unit: np.ndarray) -> float:
    """Quadrature of the posterior mean of the joint GP over the u sample."""
    return z.mean(x_unit)


def z_cov(z: ZProcess, x_unit: np.ndarray, x2_unit: np.ndarray) -> float:
    """Double quadrature of the posterior covariance over the u sample."""
    x_unit = np.atleast_1d(np.asarray(x_unit, float))
    x2_unit = np.atleast_1d(np.asarray(x2_unit, float))
    if np.array_equal(x_unit, x2_unit):
        return z.var(x_unit)
    return z.cov(x_unit, x2_unit)


def updated_mean_law(z: ZProcess, x_targ_unit, candidate_unit) -> UpdatedMeanLaw:
    return z.updated_mean_law(x_targ_unit, candidate_unit)
