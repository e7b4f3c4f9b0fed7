"""Outer optimization loops: the feasibility-weighted acquisition with
variance-reduction sampling, its random-sampling twin, and the constrained
expected-improvement / deviation-number baseline, with full history capture."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import acquisition as acq
from . import sampling as smp
from .gp import GpFitError, GpPosterior, condition_with_lengthscales, fit
from .optimizers import BoxDomain, maximize_unconstrained, maximize_with_constraints
from .problem import Evaluation, JointDesign, ProblemSpec, evaluate
from .projection import ZProcess
from .quasirandom import CrnSet, latin_hypercube, make_crn

__all__ = [
    "RunConfig",
    "IterationRecord",
    "RunHistory",
    "RunError",
    "ALGORITHMS",
    "run",
    "run_efisur",
    "run_efirand",
    "run_ceidevnum",
]

ALGORITHMS = ("efisur", "efirand", "ceidevnum")


class RunError(RuntimeError):
    """A run could not proceed (model fitting failed beyond recovery)."""


@dataclass(frozen=True)
class RunConfig:
    """Settings of one optimization run."""

    algorithm: str = "efisur"
    initial_doe_size: int = 8
    max_iterations: int = 56
    seed: int = 0
    m_samples: int = 300
    n_trajectories: int = 1000
    quantizer_size: int = 20
    budget_per_dim: int = 100
    acq_starts: int = 5
    sampling_starts: int = 3
    fit_restarts: int = 5

    def validate(self, problem: ProblemSpec) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        min_doe = problem.dim_joint + 2
        if self.initial_doe_size < min_doe:
            raise ValueError(
                f"initial_doe_size must be >= d+m+2 = {min_doe}")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")


@dataclass
class IterationRecord:
    t: int
    x_targ: np.ndarray
    u_next: np.ndarray
    evaluation: Evaluation
    z_min_feas: float
    x_at_incumbent: np.ndarray
    efi_value: float
    criterion_value: float
    wall_time: float  # seconds; kept in memory, not serialized


@dataclass
class RunHistory:
    config: RunConfig
    problem_name: str
    records: list
    final_design: JointDesign
    final_z_min_feas: float
    final_incumbent_x: np.ndarray

    def incumbent_distances(self, reference_x: np.ndarray) -> np.ndarray:
        """Euclidean distance (raw design coordinates) from the incumbent to
        the reference, per iteration: entry i is the incumbent of the state
        with i points added after the initial design."""
        ref = np.asarray(reference_x, dtype=float)
        xs = [rec.x_at_incumbent for rec in self.records]
        xs.append(self.final_incumbent_x)
        return np.array([float(np.linalg.norm(x - ref)) for x in xs])

    # -- serialization (deterministic: no timing, sorted keys) ---------------
    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "problem": self.problem_name,
            "records": [
                {
                    "t": rec.t,
                    "x_targ": list(rec.x_targ),
                    "u_next": list(rec.u_next),
                    "f_value": rec.evaluation.f_value,
                    "g_values": list(rec.evaluation.g_values),
                    "z_min_feas": rec.z_min_feas,
                    "x_at_incumbent": list(rec.x_at_incumbent),
                    "efi_value": _json_float(rec.efi_value),
                    "criterion_value": _json_float(rec.criterion_value),
                }
                for rec in self.records
            ],
            "design": {
                "x": [list(ev.x) for ev in self.final_design.evaluations],
                "u": [list(ev.u) for ev in self.final_design.evaluations],
                "f": [ev.f_value for ev in self.final_design.evaluations],
                "g": [list(ev.g_values) for ev in self.final_design.evaluations],
            },
            "final_z_min_feas": self.final_z_min_feas,
            "final_incumbent_x": list(self.final_incumbent_x),
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @staticmethod
    def load(path, problem: ProblemSpec | None = None) -> "RunHistory":
        with open(path) as fh:
            data = json.load(fh)
        return RunHistory.from_dict(data, problem)

    @staticmethod
    def from_dict(data: dict, problem: ProblemSpec | None = None) -> "RunHistory":
        from .problem import get_problem

        if problem is None:
            problem = get_problem(data["problem"])
        config = RunConfig(**data["config"])
        design = JointDesign(problem)
        d = data["design"]
        for x, u, f, g in zip(d["x"], d["u"], d["f"], d["g"]):
            design.append(Evaluation(np.array(x), np.array(u), float(f),
                                     np.array(g)))
        records = []
        for rec in data["records"]:
            idx = rec["t"] + len(d["x"]) - len(data["records"]) - 1
            ev = design.evaluations[idx]
            records.append(IterationRecord(
                t=rec["t"], x_targ=np.array(rec["x_targ"]),
                u_next=np.array(rec["u_next"]), evaluation=ev,
                z_min_feas=rec["z_min_feas"],
                x_at_incumbent=np.array(rec["x_at_incumbent"]),
                efi_value=_from_json_float(rec["efi_value"]),
                criterion_value=_from_json_float(rec["criterion_value"]),
                wall_time=float("nan"),
            ))
        return RunHistory(
            config=config, problem_name=data["problem"], records=records,
            final_design=design,
            final_z_min_feas=data["final_z_min_feas"],
            final_incumbent_x=np.array(data["final_incumbent_x"]),
        )


def _json_float(v: float):
    return None if (v is None or math.isnan(v)) else float(v)


def _from_json_float(v):
    return float("nan") if v is None else float(v)


# ---------------------------------------------------------------------------
# Shared machinery.
# ---------------------------------------------------------------------------

def _fit_models(design: JointDesign, restarts: int, prev: list | None):
    """Refit the objective GP and every constraint GP; a failed hyperparameter
    search falls back to the previous iteration's lengthscales."""
    X = design.unit_inputs
    outputs = [design.f_values] + [design.g_matrix[:, i]
                                   for i in range(design.g_matrix.shape[1])]
    models = []
    for k, y in enumerate(outputs):
        try:
            models.append(fit(X, y, restarts=restarts))
        except GpFitError:
            if prev is None:
                raise RunError("initial GP fit failed") from None
            models.append(condition_with_lengthscales(
                prev[k].kernel.lengthscales, X, y))
    return models


def _build_context(problem: ProblemSpec, models: list, crn: CrnSet,
                   design: JointDesign) -> acq.AcquisitionContext:
    z = ZProcess(models[0], crn)
    ctx = acq.AcquisitionContext(z=z, constraint_gps=models[1:], crn=crn,
                                 alpha=problem.alpha)
    x_unit = np.array([problem.x_to_unit(x) for x in design.x_values])
    z_min, x_at = acq.current_feasible_min(ctx, x_unit)
    ctx.z_min_feas = z_min
    ctx.x_at_incumbent = x_at
    return ctx


def _maximize_efi(ctx: acq.AcquisitionContext, problem: ProblemSpec,
                  config: RunConfig, iteration: int):
    """Best design for the feasibility-weighted acquisition. The probe stage
    is batched and skips the trajectory estimator wherever the expected
    improvement already vanishes (the product is then zero)."""
    z = ctx.z

    def efi_batch(X):
        m, var = z.mean_var_many(X)
        ei = acq.expected_improvement(m, np.sqrt(var), ctx.z_min_feas)
        out = np.zeros(X.shape[0])
        cutoff = max(ei.max() * 1e-9, 0.0)
        live = np.nonzero(ei > cutoff)[0]
        if live.size:
            out[live] = ei[live] * acq.prob_feasible_many(ctx, X[live])
        return out

    domain = BoxDomain(np.zeros(problem.dim_x), np.ones(problem.dim_x))
    report = maximize_unconstrained(
        lambda x: acq.efi(ctx, x), domain,
        budget=config.budget_per_dim * problem.dim_x,
        starts=config.acq_starts, seed=iteration,
        probe_objective=efi_batch,
    )
    return report.best_point, report.best_value


def _maximize_constrained_ei(ctx: acq.AcquisitionContext, problem: ProblemSpec,
                             config: RunConfig, iteration: int):
    """Best design for expected improvement under the empirical-quantile
    constraints; the solver's least-violation fallback keeps the run going."""
    z = ctx.z

    def ei_of(x):
        return acq.expected_improvement(z.mean(x), z.sd(x), ctx.z_min_feas)

    cons = [
        (lambda x, i=i: acq.empirical_quantile_constraint(ctx, x, i))
        for i in range(len(ctx.constraint_gps))
    ]
    domain = BoxDomain(np.zeros(problem.dim_x), np.ones(problem.dim_x))
    report = maximize_with_constraints(
        ei_of, cons, domain,
        budget=config.budget_per_dim * problem.dim_x,
        seed=iteration, starts=config.acq_starts,
    )
    return report.best_point, report.best_value, report.status


def _minimize_deviation_number(ctx: acq.AcquisitionContext, x_next_unit,
                               problem: ProblemSpec, config: RunConfig,
                               iteration: int):
    domain = BoxDomain(np.zeros(problem.dim_u), np.ones(problem.dim_u))
    try:
        report = maximize_unconstrained(
            lambda u: -acq.deviation_number(ctx, x_next_unit, u), domain,
            budget=config.budget_per_dim * problem.dim_u,
            starts=config.sampling_starts, seed=iteration,
        )
        return report.best_point, -report.best_value
    except RuntimeError:
        # deviation number can be +inf everywhere (a constraint model with
        # no posterior variance): fall back to a quasi-random point
        from .quasirandom import sobol_sequence
        return sobol_sequence(problem.dim_u, 1, skip=1 + iteration)[0], float("inf")


def run(problem: ProblemSpec, config: RunConfig) -> RunHistory:
    """Execute one optimization run of the configured algorithm.

    Every iteration refits the GPs, recomputes the incumbent, selects a
    design point by the algorithm's acquisition rule and an uncertainty point
    by its sampling rule, and calls the simulator exactly once.

    BLAS threading is pinned to one thread for the duration of the run: the
    inner linear algebra is a stream of small factorizations and products
    where thread handoff costs more than it saves, and replications already
    parallelize across processes.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        return _run_inner(problem, config)


def _run_inner(problem: ProblemSpec, config: RunConfig) -> RunHistory:
    config.validate(problem)
    algorithm = config.algorithm
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(1,)))
    crn = make_crn(problem, M=config.m_samples, N=config.n_trajectories,
                   seed=config.seed)

    doe = latin_hypercube(problem.dim_joint, config.initial_doe_size,
                          config.seed)
    design = JointDesign(problem)
    d = problem.dim_x
    for point in doe.points:
        x = problem.x_from_unit(point[:d])
        u = problem.u_from_unit(point[d:])
        design.append(evaluate(problem, x, u))

    models = None
    records = []
    for t in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        models = _fit_models(design, config.fit_restarts, models)
        ctx = _build_context(problem, models, crn, design)

        criterion_value = float("nan")
        if algorithm in ("efisur", "efirand"):
            x_unit, acq_value = _maximize_efi(ctx, problem, config, t)
        else:
            x_unit, acq_value, _ = _maximize_constrained_ei(
                ctx, problem, config, t)

        if algorithm == "efisur":
            sctx = smp.SamplingContext(ctx, x_unit)
            u_unit = smp.select_next_u(
                sctx, K=config.quantizer_size,
                budget=config.budget_per_dim * problem.dim_u,
                starts=config.sampling_starts, seed=t)
            try:
                criterion_value = smp.sampling_criterion(
                    sctx, sctx.candidate_point(u_unit), config.quantizer_size)
            except Exception:
                criterion_value = float("nan")
        elif algorithm == "efirand":
            u_raw = problem.dist_u.sample(rng, 1)[0]
            u_unit = problem.u_to_unit(u_raw)
        else:
            u_unit, criterion_value = _minimize_deviation_number(
                ctx, x_unit, problem, config, t)

        x_raw = problem.x_from_unit(x_unit)
        u_raw = problem.u_from_unit(u_unit)
        tries = 0
        while design.is_duplicate(x_raw, u_raw) and tries < 16:
            u_raw = problem.dist_u.sample(rng, 1)[0]
            tries += 1
        ev = evaluate(problem, x_raw, u_raw)
        design.append(ev)
        records.append(IterationRecord(
            t=t, x_targ=x_raw, u_next=u_raw, evaluation=ev,
            z_min_feas=ctx.z_min_feas,
            x_at_incumbent=problem.x_from_unit(ctx.x_at_incumbent),
            efi_value=float(acq_value), criterion_value=criterion_value,
            wall_time=time.perf_counter() - t0,
        ))

    models = _fit_models(design, config.fit_restarts, models)
    ctx = _build_context(problem, models, crn, design)
    return RunHistory(
        config=config, problem_name=problem.name, records=records,
        final_design=design, final_z_min_feas=ctx.z_min_feas,
        final_incumbent_x=problem.x_from_unit(ctx.x_at_incumbent),
    )


def run_efisur(problem: ProblemSpec, config: RunConfig) -> RunHistory:
    if config.algorithm != "efisur":
        config = RunConfig(**{**asdict(config), "algorithm": "efisur"})
    return run(problem, config)


def run_efirand(problem: ProblemSpec, config: RunConfig) -> RunHistory:
    if config.algorithm != "efirand":
        config = RunConfig(**{**asdict(config), "algorithm": "efirand"})
    return run(problem, config)


def run_ceidevnum(problem: ProblemSpec, config: RunConfig) -> RunHistory:
    if config.algorithm != "ceidevnum":
        config = RunConfig(**{**asdict(config), "algorithm": "ceidevnum"})
    return run(problem, config)
