"""Replicated benchmark campaigns: convergence metrics against a reference
design, machine-readable reports and plot data, and the final-model
feasibility check."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from . import acquisition as acq
from .driver import RunConfig, RunHistory, run
from .problem import (BENCHMARK_REFERENCE_X, ProblemSpec, get_problem,
                      reference_solution)
from .projection import ZProcess
from .quasirandom import make_crn

__all__ = [
    "CampaignConfig",
    "ConvergenceTable",
    "CampaignError",
    "run_campaign",
    "emit_report",
    "parse_report_csv",
    "validate_final_model",
    "BOXPLOT_ITERATIONS",
]

BOXPLOT_ITERATIONS = (10, 20, 30)


class CampaignError(RuntimeError):
    """Every replication of some algorithm failed."""


@dataclass
class CampaignConfig:
    problem: str = "analytic-2x2"
    algorithms: tuple = ("efisur", "efirand", "ceidevnum")
    replications: int = 20
    base_seed: int = 0
    run_template: RunConfig = field(default_factory=RunConfig)
    out_dir: str = "results"
    workers: int = 1
    reference_x: np.ndarray | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.algorithms:
            raise ValueError("at least one algorithm is required")

    def resolve_reference(self, problem: ProblemSpec) -> np.ndarray:
        if self.reference_x is not None:
            return np.asarray(self.reference_x, dtype=float)
        if self.problem == "analytic-2x2":
            return BENCHMARK_REFERENCE_X.copy()
        return reference_solution(problem)


@dataclass
class ConvergenceTable:
    """Per (algorithm, iteration) summary of the Euclidean distance between
    the runs' incumbents and the reference design, in raw coordinates."""

    rows: dict  # (algorithm, iteration) -> (mean, median, q25, q75)
    reference_x: np.ndarray

    def algorithms(self):
        return sorted({a for a, _ in self.rows})

    def iterations(self, algorithm: str):
        return sorted(i for a, i in self.rows if a == algorithm)

    def stats(self, algorithm: str, iteration: int):
        return self.rows[(algorithm, iteration)]


def _distance_stats(dists: np.ndarray):
    return (
        float(np.mean(dists)),
        float(np.median(dists)),
        float(np.percentile(dists, 25)),
        float(np.percentile(dists, 75)),
    )


def _campaign_worker(args):
    """One run in a worker process; returns a serializable payload."""
    problem_name, config_dict = args
    problem = get_problem(problem_name)
    config = RunConfig(**config_dict)
    try:
        history = run(problem, config)
        return config.algorithm, config.seed, history.to_dict(), None
    except Exception as exc:  # recorded, campaign continues
        return config.algorithm, config.seed, None, repr(exc)


def run_campaign(config: CampaignConfig) -> ConvergenceTable:
    """Execute replications x algorithms runs, write one history file per
    run plus aggregate and plot-data files, and return the distance table.

    Individual run failures are recorded in `failures.json` and skipped; the
    campaign raises only if every replication of an algorithm failed.
    """
    problem = get_problem(config.problem)
    reference = config.resolve_reference(problem)
    os.makedirs(config.out_dir, exist_ok=True)

    jobs = []
    for algo in config.algorithms:
        for rep in range(config.replications):
            run_cfg = asdict(config.run_template)
            run_cfg["algorithm"] = algo
            run_cfg["seed"] = config.base_seed + rep
            jobs.append((config.problem, run_cfg))

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_campaign_worker, jobs))
    else:
        results = [_campaign_worker(job) for job in jobs]

    distances: dict[str, list[np.ndarray]] = {a: [] for a in config.algorithms}
    failures = []
    for (algo, seed, payload, error), (_, run_cfg) in zip(results, jobs):
        rep = seed - config.base_seed
        if error is not None:
            failures.append({"algorithm": algo, "replicate": rep,
                             "error": error})
            continue
        history = RunHistory.from_dict(payload, problem)
        path = os.path.join(config.out_dir,
                            f"history_{algo}_rep{rep:03d}.json")
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
        distances[algo].append(history.incumbent_distances(reference))

    if failures:
        with open(os.path.join(config.out_dir, "failures.json"), "w") as fh:
            json.dump(failures, fh, sort_keys=True, indent=1)
    for algo in config.algorithms:
        if not distances[algo]:
            raise CampaignError(f"all replications of {algo!r} failed")

    rows = {}
    boxplot = {}
    for algo in config.algorithms:
        mat = np.vstack(distances[algo])  # (reps_ok, T+1)
        for it in range(mat.shape[1]):
            rows[(algo, it)] = _distance_stats(mat[:, it])
        boxplot[algo] = {
            str(it): [float(v) for v in mat[:, it]]
            for it in BOXPLOT_ITERATIONS if it < mat.shape[1]
        }
    table = ConvergenceTable(rows=rows, reference_x=reference)

    emit_report(table, "csv", os.path.join(config.out_dir, "convergence.csv"))
    emit_report(table, "json", os.path.join(config.out_dir, "convergence.json"))
    for algo in config.algorithms:
        _write_series_csv(table, algo,
                          os.path.join(config.out_dir, f"distance_{algo}.csv"))
    with open(os.path.join(config.out_dir, "boxplot_data.json"), "w") as fh:
        json.dump({"iterations": list(BOXPLOT_ITERATIONS), "data": boxplot},
                  fh, sort_keys=True, indent=1)
        fh.write("\n")
    return table


def _write_series_csv(table: ConvergenceTable, algorithm: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "mean_dist", "median_dist", "q25", "q75"])
        for it in table.iterations(algorithm):
            mean, med, q25, q75 = table.stats(algorithm, it)
            writer.writerow([it, repr(mean), repr(med), repr(q25), repr(q75)])


REPORT_JSON_SCHEMA = {
    "reference_x": "list of floats",
    "rows": [
        {"algorithm": "str", "iteration": "int", "mean_dist": "float",
         "median_dist": "float", "q25": "float", "q75": "float"}
    ],
}


def emit_report(table: ConvergenceTable, fmt: str, path) -> None:
    """Write the convergence table as CSV (columns algorithm, iteration,
    mean_dist, median_dist, q25, q75) or JSON (schema REPORT_JSON_SCHEMA)."""
    if not table.rows:
        raise ValueError("cannot emit an empty table")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["algorithm", "iteration", "mean_dist",
                             "median_dist", "q25", "q75"])
            for (algo, it) in sorted(table.rows):
                mean, med, q25, q75 = table.rows[(algo, it)]
                writer.writerow([algo, it, repr(mean), repr(med),
                                 repr(q25), repr(q75)])
    elif fmt == "json":
        payload = {
            "reference_x": [float(v) for v in table.reference_x],
            "rows": [
                {"algorithm": a, "iteration": i, "mean_dist": s[0],
                 "median_dist": s[1], "q25": s[2], "q75": s[3]}
                for (a, i), s in sorted(table.rows.items())
            ],
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)
            fh.write("\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def parse_report_csv(path) -> ConvergenceTable:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            key = (rec["algorithm"], int(rec["iteration"]))
            rows[key] = (float(rec["mean_dist"]), float(rec["median_dist"]),
                         float(rec["q25"]), float(rec["q75"]))
    return ConvergenceTable(rows=rows, reference_x=np.array([]))


def validate_final_model(history: RunHistory, repeats: int = 500,
                         M: int = 1000, N: int = 1000) -> dict:
    """Re-estimate the feasibility probability at the final incumbent with
    fresh quasi-random u blocks and fresh trajectory seeds, `repeats` times.

    Returns the estimates with their quartile summary and the position of
    the reliability line 1 - alpha.
    """
    if history.final_incumbent_x is None or not np.all(
            np.isfinite(history.final_incumbent_x)):
        raise ValueError("history has no usable incumbent")
    problem = get_problem(history.problem_name)
    from .driver import _fit_models

    with threadpool_limits(limits=1, user_api="blas"):
        models = _fit_models(history.final_design,
                             history.config.fit_restarts, None)
        x_unit = problem.x_to_unit(history.final_incumbent_x)
        estimates = np.empty(repeats)
        for r in range(repeats):
            crn = make_crn(problem, M=M, N=N,
                           seed=history.config.seed + 100003 + r,
                           skip=1 + r * M)
            ctx = acq.AcquisitionContext(
                z=ZProcess(models[0], crn), constraint_gps=models[1:],
                crn=crn, alpha=problem.alpha)
            estimates[r] = acq.prob_feasible_with_confidence(ctx, x_unit)
    return {
        "estimates": [float(v) for v in estimates],
        "median": float(np.median(estimates)),
        "q25": float(np.percentile(estimates, 25)),
        "q75": float(np.percentile(estimates, 75)),
        "min": float(np.min(estimates)),
        "max": float(np.max(estimates)),
        "alpha_line": 1.0 - problem.alpha,
        "repeats": repeats,
        "M": M,
        "N": N,
    }
