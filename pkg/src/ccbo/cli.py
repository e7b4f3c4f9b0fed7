"""Command-line harness.

Verbs: `run` (single optimization run), `campaign` (replicated study),
`reference` (brute-force solution of a registered problem), `validate`
(final-model feasibility check on a saved history), `report` (re-aggregate
existing history files).

Exit codes: 0 success, 1 configuration error, 2 run failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from .bench import (CampaignConfig, CampaignError, ConvergenceTable,
                    emit_report, run_campaign, validate_final_model,
                    _distance_stats)
from .driver import RunConfig, RunHistory, run
from .problem import NoFeasiblePointError, get_problem, reference_estimates, \
    reference_solution
from .quasirandom import dump_crn, make_crn

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUN = 2
EXIT_IO = 3

RUN_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _load_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path)
    return parser


def _run_config_from(parser: configparser.ConfigParser,
                     overrides: dict) -> RunConfig:
    values = {}
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in RUN_FIELDS:
                raise ValueError(f"unknown [run] option {key!r}")
            values[key] = raw if key == "algorithm" else int(raw)
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    return RunConfig(**values)


def _campaign_config_from(parser, run_template: RunConfig, args) -> CampaignConfig:
    values = {}
    if parser.has_section("campaign"):
        sec = parser["campaign"]
        if "problem" in sec:
            values["problem"] = sec["problem"]
        if "algorithms" in sec:
            values["algorithms"] = tuple(
                a.strip() for a in sec["algorithms"].replace(",", " ").split())
        for key in ("replications", "base_seed", "workers"):
            if key in sec:
                values[key] = sec.getint(key)
        if "reference_x" in sec:
            values["reference_x"] = np.array(
                [float(v) for v in sec["reference_x"].split()])
    if args.algo:
        values["algorithms"] = tuple(args.algo.replace(",", " ").split())
    if args.replications is not None:
        values["replications"] = args.replications
    if args.seed is not None:
        values["base_seed"] = args.seed
    if args.out:
        values["out_dir"] = args.out
    if getattr(args, "workers", None) is not None:
        values["workers"] = args.workers
    if getattr(args, "problem", None):
        values["problem"] = args.problem
    return CampaignConfig(run_template=run_template, **values)


def cmd_run(args) -> int:
    parser = _load_config(args.config)
    overrides = {"algorithm": args.algo, "seed": args.seed,
                 "max_iterations": args.iters}
    config = _run_config_from(parser, overrides)
    problem_name = args.problem or (
        parser.get("campaign", "problem", fallback="analytic-2x2"))
    problem = get_problem(problem_name)
    if args.dump_crn:
        crn = make_crn(problem, M=config.m_samples,
                       N=config.n_trajectories, seed=config.seed)
        dump_crn(crn, args.dump_crn)
    history = run(problem, config)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(
        out_dir, f"history_{config.algorithm}_seed{config.seed}.json")
    history.save(path)
    print(f"run complete: {len(history.records)} iterations, "
          f"incumbent {history.final_incumbent_x.tolist()} "
          f"(z_min_feas={history.final_z_min_feas:.6g})")
    print(f"history written to {path}")
    return EXIT_OK


def cmd_campaign(args) -> int:
    parser = _load_config(args.config)
    run_template = _run_config_from(parser, {"max_iterations": args.iters})
    config = _campaign_config_from(parser, run_template, args)
    table = run_campaign(config)
    print(f"campaign complete: {len(config.algorithms)} algorithms x "
          f"{config.replications} replications -> {config.out_dir}")
    last = max(i for _, i in table.rows)
    for algo in table.algorithms():
        stats = table.stats(algo, last)
        print(f"  {algo}: final median distance {stats[1]:.4f}")
    return EXIT_OK


def cmd_reference(args) -> int:
    parser = _load_config(args.config)
    problem_name = args.problem or (
        parser.get("campaign", "problem", fallback="analytic-2x2"))
    problem = get_problem(problem_name)
    grid_res = args.grid_res or parser.getint("reference", "grid_res",
                                              fallback=41)
    mc_size = args.mc_size or parser.getint("reference", "mc_size",
                                            fallback=20000)
    x = reference_solution(problem, grid_res=grid_res, mc_size=mc_size)
    f_mean, p_feas = reference_estimates(problem, x, mc_size=mc_size)
    payload = {"problem": problem_name, "x": [float(v) for v in x],
               "mean_objective": f_mean, "feasibility_probability": p_feas,
               "grid_res": grid_res, "mc_size": mc_size}
    print(json.dumps(payload, indent=1, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "reference.json"), "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_validate(args) -> int:
    parser = _load_config(args.config)
    repeats = args.repeats or parser.getint("validate", "repeats", fallback=500)
    M = parser.getint("validate", "m_samples", fallback=1000)
    N = parser.getint("validate", "n_trajectories", fallback=1000)
    history = RunHistory.load(args.history)
    result = validate_final_model(history, repeats=repeats, M=M, N=N)
    summary = {k: v for k, v in result.items() if k != "estimates"}
    print(json.dumps(summary, indent=1, sort_keys=True))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "validation.json"), "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.out or ".", "history_*.json")))
    if not paths:
        raise FileNotFoundError("no history files found to aggregate")
    parser = _load_config(args.config)
    first = RunHistory.load(paths[0])
    problem = get_problem(first.problem_name)
    template = _campaign_config_from(parser, first.config, args)
    reference = template.resolve_reference(problem)
    per_algo: dict[str, list[np.ndarray]] = {}
    for path in paths:
        history = RunHistory.load(path, problem)
        per_algo.setdefault(history.config.algorithm, []).append(
            history.incumbent_distances(reference))
    rows = {}
    for algo, series in per_algo.items():
        mat = np.vstack(series)
        for it in range(mat.shape[1]):
            rows[(algo, it)] = _distance_stats(mat[:, it])
    table = ConvergenceTable(rows=rows, reference_x=reference)
    out_dir = args.out or "."
    emit_report(table, "csv", os.path.join(out_dir, "convergence.csv"))
    emit_report(table, "json", os.path.join(out_dir, "convergence.json"))
    print(f"aggregated {len(paths)} histories into {out_dir}/convergence.*")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccbo",
        description="Chance-constrained Bayesian optimization harness")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--seed", type=int, help="run seed / campaign base seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--algo", help="algorithm name(s)")
        p.add_argument("--iters", type=int, help="iteration budget")
        p.add_argument("--replications", type=int)
        p.add_argument("--problem", help="registered problem name")

    p_run = sub.add_parser("run", help="single optimization run")
    common(p_run)
    p_run.add_argument("--dump-crn", help="write the CRN set to a CSV file")
    p_run.set_defaults(func=cmd_run)

    p_camp = sub.add_parser("campaign", help="replicated study")
    common(p_camp)
    p_camp.add_argument("--workers", type=int, help="parallel run workers")
    p_camp.set_defaults(func=cmd_campaign)

    p_ref = sub.add_parser("reference", help="brute-force reference solution")
    common(p_ref)
    p_ref.add_argument("--grid-res", type=int, dest="grid_res")
    p_ref.add_argument("--mc-size", type=int, dest="mc_size")
    p_ref.set_defaults(func=cmd_reference)

    p_val = sub.add_parser("validate", help="final-model feasibility check")
    common(p_val)
    p_val.add_argument("--history", required=True, help="history JSON file")
    p_val.add_argument("--repeats", type=int)
    p_val.set_defaults(func=cmd_validate)

    p_rep = sub.add_parser("report", help="aggregate existing histories")
    common(p_rep)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError, configparser.Error) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError,) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CampaignError, NoFeasiblePointError, RuntimeError) as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    raise SystemExit(main())
