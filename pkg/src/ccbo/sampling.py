"""Selection of the next uncertainty point: the product criterion combining
the one-step-ahead improvement variance at the targeted design with the
u-averaged one-step-ahead feasibility Bernoulli variance, evaluated through a
fixed-size normal quantizer and rank-one posterior updates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .acquisition import (AcquisitionContext, expected_improvement,
                          norm_pdf, variance_of_improvement)
from .gp import DegeneratePointError
from .projection import UpdatedMeanLaw
from .quasirandom import sobol_sequence

__all__ = [
    "Quantizer",
    "SamplingContext",
    "quantize_normal",
    "improvement_variance_term",
    "feasibility_variance_term",
    "sampling_criterion",
    "select_next_u",
]

DEFAULT_K = 20


@lru_cache(maxsize=None)
def _normal_quantizer(K: int):
    """Lloyd fixed point of the K-level quantizer of N(0,1): nodes are cell
    centroids, weights the cell probabilities. Cached; deterministic."""
    if K < 1:
        raise ValueError("quantizer size must be >= 1")
    if K == 1:
        return np.zeros(1), np.ones(1)
    # start from equiprobable-cell centroids
    from scipy.special import ndtri
    nodes = ndtri((2.0 * np.arange(K) + 1.0) / (2.0 * K))
    for _ in range(500):
        inner = 0.5 * (nodes[1:] + nodes[:-1])
        cdf = np.concatenate([[0.0], ndtr(inner), [1.0]])
        pdf = np.concatenate([[0.0], norm_pdf(inner), [0.0]])
        weights = np.diff(cdf)
        centroids = -(np.diff(pdf)) / np.maximum(weights, 1e-300)
        if np.max(np.abs(centroids - nodes)) < 1e-13:
            nodes = centroids
            break
        nodes = centroids
    inner = 0.5 * (nodes[1:] + nodes[:-1])
    weights = np.diff(np.concatenate([[0.0], ndtr(inner), [1.0]]))
    return nodes, weights


@dataclass(frozen=True)
class Quantizer:
    """Discrete stand-in for a Gaussian law: sorted nodes with probability
    weights; the weighted mean reproduces the target mean exactly."""

    nodes: np.ndarray
    weights: np.ndarray
    target: UpdatedMeanLaw

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        if abs(float(np.sum(self.weights)) - 1.0) > 1e-9:
            raise ValueError("weights must sum to one")
        if np.any(np.diff(self.nodes) < 0):
            raise ValueError("nodes must be sorted ascending")


def quantize_normal(law: UpdatedMeanLaw, K: int = DEFAULT_K) -> Quantizer:
    """Affinely scaled K-level reference quantizer of N(0,1); for sd = 0 all
    nodes collapse onto the mean."""
    ref_nodes, ref_weights = _normal_quantizer(K)
    return Quantizer(nodes=law.mean + law.sd * ref_nodes,
                     weights=ref_weights.copy(), target=law)


class SamplingContext:
    """Precomputed state for one inner sampling solve at a fixed targeted
    design: slice factors of the objective GP and of every constraint GP at
    {(x_targ, u_j)}, current projected mean/variance, and the constraint
    posterior statistics the Kriging-Believer update keeps frozen."""

    def __init__(self, ctx: AcquisitionContext, x_targ_unit: np.ndarray):
        if math.isnan(ctx.z_min_feas):
            raise ValueError("incumbent must be set before sampling")
        self.ctx = ctx
        self.x_targ = np.atleast_1d(np.asarray(x_targ_unit, dtype=float))
        z = ctx.z
        self.P_targ = z.slice_points(self.x_targ[None, :])
        gpF = z.gp
        self.gpF = gpF
        self.V_targ_F = gpF.v_factor(self.P_targ)          # (t, M)
        self.z_mean_targ = float(np.mean(gpF.predict_mean(self.P_targ)))
        vbar = self.V_targ_F.mean(axis=1)
        self.z_var_targ = max(
            gpF.kernel.variance * (z._mean_R_uu - float(vbar @ vbar)), 0.0)
        self.con = []
        for gp in ctx.constraint_gps:
            V = gp.v_factor(self.P_targ)
            self.con.append({
                "gp": gp,
                "V": V,
                "mean": gp.predict_mean(self.P_targ),
                "var": np.maximum(
                    gp.kernel.variance * (1.0 - np.sum(V * V, axis=0)), 0.0),
            })

    def candidate_point(self, u_unit: np.ndarray) -> np.ndarray:
        return np.concatenate([self.x_targ,
                               np.atleast_1d(np.asarray(u_unit, float))])

    def _f_update(self, candidate: np.ndarray):
        """(covariance of the x_targ slice with the candidate, denominator)
        under the objective GP; raises for a spent candidate."""
        gp = self.gpF
        v_cand = solve_triangular(
            gp.L, gp.corr_with_train(candidate[None, :]), lower=True,
            check_finite=False)[:, 0]
        k_cc = gp.kernel.variance * max(1.0 - float(v_cand @ v_cand), 0.0)
        floor = gp.jitter * gp.kernel.variance
        if k_cc <= floor:
            raise DegeneratePointError(
                "candidate carries no residual objective-GP variance")
        r = gp.kernel.corr(self.P_targ, candidate[None, :])[:, 0]
        cov_vec = gp.kernel.variance * (r - self.V_targ_F.T @ v_cand)
        return cov_vec, k_cc + floor


def improvement_variance_term(s: SamplingContext, candidate_unit: np.ndarray,
                              K: int = DEFAULT_K) -> float:
    """One-step-ahead variance of the improvement at the targeted design:
    mean of the closed-form improvement variance plus the variance of the
    closed-form expected improvement, both taken over the K-level quantizer
    of the Gaussian one-step-ahead projected mean. The one-step-ahead
    projected sd is deterministic and comes from the rank-one update."""
    candidate = np.atleast_1d(np.asarray(candidate_unit, dtype=float))
    cov_vec, denom = s._f_update(candidate)
    num = float(np.mean(cov_vec))
    law_sd = abs(num) / math.sqrt(denom)
    sd_next = math.sqrt(max(s.z_var_targ - num * num / denom, 0.0))
    ref_nodes, ref_weights = _normal_quantizer(K)
    nodes = s.z_mean_targ + law_sd * ref_nodes
    z_min = s.ctx.z_min_feas
    vi = variance_of_improvement(nodes, sd_next, z_min)
    ei = expected_improvement(nodes, sd_next, z_min)
    mean_vi = float(ref_weights @ vi)
    var_ei = float(ref_weights @ (ei * ei)) - float(ref_weights @ ei) ** 2
    return max(mean_vi + max(var_ei, 0.0), 0.0)


def feasibility_variance_term(s: SamplingContext,
                              candidate_unit: np.ndarray) -> float:
    """u-averaged Bernoulli variance p(1-p) of joint constraint feasibility
    at the targeted design, with constraint means frozen (Kriging Believer)
    and variances downdated by the rank-one update at the candidate."""
    candidate = np.atleast_1d(np.asarray(candidate_unit, dtype=float))
    p = np.ones(s.P_targ.shape[0])
    for c in s.con:
        gp = c["gp"]
        v_cand = solve_triangular(
            gp.L, gp.corr_with_train(candidate[None, :]), lower=True,
            check_finite=False)[:, 0]
        k_cc = gp.kernel.variance * max(1.0 - float(v_cand @ v_cand), 0.0)
        floor = gp.jitter * gp.kernel.variance
        if k_cc <= floor:
            var_next = c["var"]  # spent candidate: no variance reduction
        else:
            r = gp.kernel.corr(s.P_targ, candidate[None, :])[:, 0]
            cov_vec = gp.kernel.variance * (r - c["V"].T @ v_cand)
            var_next = np.maximum(c["var"] - cov_vec**2 / (k_cc + floor), 0.0)
        m = c["mean"]
        sd = np.sqrt(var_next)
        with np.errstate(divide="ignore", invalid="ignore"):
            probs = np.where(
                sd > 0, ndtr(np.where(sd > 0, -m / np.where(sd > 0, sd, 1.0), 0.0)),
                np.where(m < 0, 1.0, np.where(m == 0, 0.5, 0.0)),
            )
        p *= probs
    return float(np.mean(p * (1.0 - p)))


def sampling_criterion(s: SamplingContext, candidate_unit: np.ndarray,
                       K: int = DEFAULT_K) -> float:
    """Product of the improvement-variance and feasibility-variance terms;
    small values mean the candidate resolves the most uncertainty."""
    term2 = feasibility_variance_term(s, candidate_unit)
    term1 = improvement_variance_term(s, candidate_unit, K)
    return term1 * term2


def select_next_u(s: SamplingContext, K: int = DEFAULT_K,
                  budget: int | None = None, starts: int = 3,
                  seed: int = 0) -> np.ndarray:
    """Minimize the sampling criterion over the uncertainty cube with the
    design fixed at the targeted point; candidates that have already been
    observed evaluate to +inf so the solver steers away from them. Falls back
    to the best point of a 128-point Sobol probe if the solve fails."""
    from .optimizers import BoxDomain, maximize_unconstrained

    m = s.ctx.crn.u_unit.shape[1]
    if budget is None:
        budget = 100 * m

    def neg_criterion(u_unit):
        try:
            return -sampling_criterion(s, s.candidate_point(u_unit), K)
        except DegeneratePointError:
            return -math.inf

    domain = BoxDomain(np.zeros(m), np.ones(m))
    try:
        report = maximize_unconstrained(neg_criterion, domain, budget=budget,
                                        starts=starts, seed=seed)
        return np.asarray(report.best_point, dtype=float)
    except RuntimeError:
        probe = sobol_sequence(m, 128, skip=1)
        vals = np.array([neg_criterion(u) for u in probe])
        return probe[int(np.argmax(vals))]
