"""Derivative-free inner solvers for the acquisition and sampling steps:
bounded multi-start local search seeded from a quasi-random probe, and a
linear-approximation constrained search with a least-violation fallback."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .quasirandom import sobol_sequence

__all__ = [
    "BoxDomain",
    "SolveReport",
    "maximize_unconstrained",
    "maximize_with_constraints",
]

FEAS_TOL = 1e-6


@dataclass(frozen=True)
class BoxDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("domain needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def clip(self, p: np.ndarray) -> np.ndarray:
        return np.clip(p, self.lower, self.upper)

    def scipy_bounds(self):
        return list(zip(self.lower, self.upper))


@dataclass(frozen=True)
class SolveReport:
    best_point: np.ndarray
    best_value: float
    evaluations_used: int
    status: str  # "converged" | "budget-exhausted" | "fallback"


def _probe_points(domain: BoxDomain, count: int, seed: int) -> np.ndarray:
    """Quasi-random probe of the box, rotated by the seed so distinct solves
    explore distinct (but reproducible) point sets."""
    unit = sobol_sequence(domain.dim, count, skip=1 + count * (seed % 1024))
    return domain.lower + unit * (domain.upper - domain.lower)


def maximize_unconstrained(objective, domain: BoxDomain, budget: int,
                           starts: int = 5, seed: int = 0,
                           probe_objective=None, probe_cap: int = 128) -> SolveReport:
    """Maximize a black-box function on a box within a fixed evaluation
    budget: rank a Sobol probe, then polish the best probes with bounded
    Nelder-Mead. Deterministic for a fixed seed.

    `probe_objective`, when given, evaluates the whole probe matrix at once
    (same values as `objective`, batched for speed). Non-finite objective
    values abandon the affected start; if nothing finite is found anywhere a
    RuntimeError is raised.
    """
    dim = domain.dim
    if budget < dim + 2:
        raise ValueError(f"budget must be at least dim+2 = {dim + 2}")
    n_probe = min(probe_cap, max(dim + 2, budget // 4))
    probes = _probe_points(domain, n_probe, seed)
    if probe_objective is not None:
        probe_vals = np.asarray(probe_objective(probes), dtype=float)
    else:
        probe_vals = np.array([objective(p) for p in probes], dtype=float)
    used = n_probe
    probe_vals = np.where(np.isfinite(probe_vals), probe_vals, -np.inf)
    if not np.any(probe_vals > -np.inf):
        raise RuntimeError("objective was non-finite at every probe point")
    order = np.argsort(-probe_vals)
    best_idx = int(order[0])
    best_point = probes[best_idx].copy()
    best_value = float(probe_vals[best_idx])

    remaining = budget - used
    per_start = remaining // max(starts, 1)
    if per_start < dim + 2:
        return SolveReport(best_point, best_value, used, "budget-exhausted")

    converged = False
    for k in range(min(starts, n_probe)):
        x0 = probes[int(order[k])]
        if not np.isfinite(probe_vals[int(order[k])]):
            continue
        res = minimize(
            lambda p: -_finite_or_penalty(objective, domain.clip(p)),
            x0, method="Nelder-Mead", bounds=domain.scipy_bounds(),
            options={"maxfev": per_start, "xatol": 1e-6, "fatol": 1e-10},
        )
        used += res.nfev
        val = -res.fun
        if np.isfinite(val) and val > best_value:
            best_value = val
            best_point = domain.clip(res.x)
        converged = converged or bool(res.success)
    status = "converged" if converged else "budget-exhausted"
    return SolveReport(best_point, float(best_value), used, status)


def _finite_or_penalty(objective, p):
    val = objective(p)
    return val if np.isfinite(val) else -1e300


def maximize_with_constraints(objective, constraints, domain: BoxDomain,
                              budget: int, seed: int = 0,
                              starts: int = 3) -> SolveReport:
    """Maximize subject to constraints (feasible at values <= 0) with the
    linear-approximation constrained solver, multi-started from a probe. When
    no feasible point is found the least-violating point is returned with
    status 'fallback'."""
    dim = domain.dim
    if budget < dim + 2:
        raise ValueError(f"budget must be at least dim+2 = {dim + 2}")
    if not constraints:
        return maximize_unconstrained(objective, domain, budget,
                                      starts=starts, seed=seed)
    n_probe = min(128, max(dim + 2, budget // 2))
    probes = _probe_points(domain, n_probe, seed)
    probe_vals = np.array([_finite_or_penalty(objective, p) for p in probes])
    probe_viol = np.array(
        [max(float(c(p)) for c in constraints) for p in probes])
    used = n_probe

    # rank probes: feasible ones by value, infeasible ones by violation
    feas = probe_viol <= FEAS_TOL
    key = np.where(feas, -probe_vals, probe_viol + 1e12)
    order = np.argsort(key)

    scipy_cons = [{"type": "ineq", "fun": (lambda p, c=c: -float(c(p)))}
                  for c in constraints]
    remaining = budget - used
    per_start = max(remaining // max(starts, 1), dim + 2)

    best = None  # (feasible, value, viol, point)
    for k in range(min(starts, n_probe)):
        x0 = probes[int(order[k])]
        res = minimize(
            lambda p: -_finite_or_penalty(objective, domain.clip(p)),
            x0, method="COBYLA", bounds=domain.scipy_bounds(),
            constraints=scipy_cons,
            options={"maxiter": per_start, "rhobeg": 0.2, "tol": 1e-8},
        )
        used += int(getattr(res, "nfev", per_start))
        point = domain.clip(res.x)
        val = _finite_or_penalty(objective, point)
        viol = max(float(c(point)) for c in constraints)
        cand = (viol <= FEAS_TOL, float(val), float(viol), point)
        if best is None or _better(cand, best):
            best = cand
    # fold in the best probe in case the solver went nowhere
    k0 = int(order[0])
    cand = (bool(feas[k0]), float(probe_vals[k0]), float(probe_viol[k0]),
            probes[k0].copy())
    if best is None or _better(cand, best):
        best = cand

    feasible, value, viol, point = best
    status = "converged" if feasible else "fallback"
    return SolveReport(point, value, used, status)


def _better(a, b):
    """Candidate ordering: any feasible beats any infeasible; feasible ones
    compare by value, infeasible ones by violation."""
    if a[0] != b[0]:
        return a[0]
    if a[0]:
        return a[1] > b[1]
    return a[2] < b[2]
