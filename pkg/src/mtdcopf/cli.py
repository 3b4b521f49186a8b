"""Command-line interface: scenario solving, validation and case checks.

Subcommands
-----------
``solve``      run the control strategies for every (scenario, mode)
               combination, writing per-run reports, aggregate tables
               and figures into the output directory.
``validate``   re-verify previously written reports through the
               independent Newton power flow.
``check-case`` parse and validate a case file and print a summary.

Exit codes: ``solve`` returns 0 when every run converged, 2 when any
run needed the fallback recomputation, 1 on errors or unrecoverable
infeasibility.  ``validate`` returns 0 only if every stored solution
passes.  The default output directory can be set through the
``MTDCOPF_OUT`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .case import (CaseError, NetworkCase, Scenario, parse_case,
                   parse_scenario)
from .equations import ConverterSetting, OpfEquations
from .nlp import SolverOptions
from .report import (MODE_LABELS, RunMatrix, report_filename, write_outputs,
                     to_text_table, AGGREGATES)
from .strategy import (Mode, StrategyError, default_stage_options,
                       run_strategy)
from .validation import PowerFlowError, verify_solution

MODE_CHOICES = {
    "active-power": Mode.ACTIVE_POWER,
    "adaptive-droop": Mode.ADAPTIVE_DROOP,
    "proposed-droop": Mode.PROPOSED_DROOP,
    "all": None,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtdcopf",
        description="Hybrid AC/DC optimal power flow with staged droop "
                    "control for MMC-MTDC grids.")
    parser.add_argument("--version", action="version",
                        version=f"mtdcopf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    solve_p = sub.add_parser("solve", help="run scenarios across modes")
    solve_p.add_argument("--case", required=True, help="case file")
    solve_p.add_argument("--scenario", action="append", default=[],
                         help="scenario file (repeatable; default: the "
                              "undisturbed network)")
    solve_p.add_argument("--mode", action="append", default=[],
                         choices=sorted(MODE_CHOICES),
                         help="control mode (repeatable; default all)")
    solve_p.add_argument("--out", default=None, help="output directory "
                         "(default $MTDCOPF_OUT or ./out)")
    solve_p.add_argument("--format", default="csv,json",
                         help="aggregate formats: comma list of "
                              "table,csv,json")
    solve_p.add_argument("--seed", type=int, default=0,
                         help="recorded run seed (outputs are "
                              "deterministic; the seed is part of the "
                              "run configuration)")
    solve_p.add_argument("--workers", type=int, default=1,
                         help="concurrent (scenario x mode) solves")
    solve_p.add_argument("--no-figures", action="store_true",
                         help="skip PNG figure rendering")
    solve_p.add_argument("--tol-feas", type=float, default=None,
                         help="equality feasibility tolerance")
    solve_p.add_argument("--tol-opt", type=float, default=None,
                         help="KKT stationarity tolerance")
    solve_p.add_argument("--max-iter", type=int, default=None,
                         help="solver iteration cap")
    solve_p.add_argument("--mu-init", type=float, default=None,
                         help="initial barrier parameter")
    solve_p.add_argument("--linear-solver", default=None,
                         choices=("auto", "dense", "sparse"),
                         help="KKT linear solver selection")

    val_p = sub.add_parser("validate",
                           help="re-verify stored solve outputs")
    val_p.add_argument("--out", default=None, help="output directory to "
                       "validate (default $MTDCOPF_OUT or ./out)")

    chk_p = sub.add_parser("check-case", help="parse and summarize a case")
    chk_p.add_argument("path", help="case file")
    return parser


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("MTDCOPF_OUT", "out"))


def _solver_options(args) -> SolverOptions:
    options = default_stage_options()
    if args.tol_feas is not None:
        options.tol_feas = args.tol_feas
    if args.tol_opt is not None:
        options.tol_opt = args.tol_opt
    if args.max_iter is not None:
        options.max_iter = args.max_iter
    if args.mu_init is not None:
        options.mu_init = args.mu_init
    if args.linear_solver is not None:
        options.linear_solver = args.linear_solver
    return options


def cmd_solve(args) -> int:
    out = _out_dir(args.out)
    started = time.time()
    try:
        case = parse_case(args.case)
        scenarios = ([parse_scenario(p) for p in args.scenario]
                     or [Scenario(name="normal")])
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        print("error: scenario names must be unique", file=sys.stderr)
        return 1
    try:
        for scen in scenarios:
            # fail fast on dangling references before any solve
            from .case import apply_scenario
            apply_scenario(case, scen)
    except CaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    mode_args = args.mode or ["all"]
    modes = []
    for m in mode_args:
        if m == "all":
            modes = list(Mode.ALL)
            break
        modes.append(MODE_CHOICES[m])

    options = _solver_options(args)
    jobs = [(scen, mode) for scen in scenarios for mode in modes]

    def run_one(job):
        scen, mode = job
        try:
            return job, run_strategy(case, scen, mode, options), None
        except (StrategyError, CaseError) as exc:
            return job, None, str(exc)

    results = {}
    failures = {}
    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(run_one, jobs))
    else:
        outcomes = [run_one(j) for j in jobs]
    for (scen, mode), rep, err in outcomes:
        if rep is not None:
            results[(scen.name, mode)] = rep
        else:
            failures[(scen.name, mode)] = err

    matrix = RunMatrix(case=case, scenarios=scenarios, reports=results,
                       failures=failures)
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    written = write_outputs(matrix, out, formats=formats,
                            case_path=str(args.case))
    if not args.no_figures:
        from .figures import render_figures
        written += render_figures(matrix, out / "figures")

    meta = {
        "command": "solve",
        "case": str(args.case),
        "scenarios": [str(p) for p in args.scenario],
        "modes": modes,
        "seed": args.seed,
        "workers": args.workers,
        "started_unix": started,
        "elapsed_s": time.time() - started,
        "version": __version__,
    }
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n")

    for (scen_name, mode), rep in sorted(results.items()):
        marker = " [fallback]" if rep.fallback_triggered else ""
        print(f"{scen_name:>16s}  {MODE_LABELS[mode]:<24s} "
              f"cost={rep.final_cost:12.4f}  vdev={rep.final_vdev:.8f}"
              f"{marker}")
    for (scen_name, mode), err in sorted(failures.items()):
        print(f"{scen_name:>16s}  {MODE_LABELS[mode]:<24s} FAILED: {err}",
              file=sys.stderr)
    print(f"wrote {len(written)} files to {out}")

    if failures:
        return 1
    if any(rep.fallback_triggered for rep in results.values()):
        return 2
    return 0


def cmd_validate(args) -> int:
    out = _out_dir(args.out)
    reports = sorted(out.glob("report_*.json"))
    if not reports:
        print(f"error: no reports found in {out}", file=sys.stderr)
        return 1
    failures = 0
    rows = [["report", "stage", "status", "eq_residual", "newton_disc",
             "verdict"]]
    cases = {}
    for path in reports:
        doc = json.loads(path.read_text())
        case_path = doc.get("case_path", "")
        if case_path not in cases:
            try:
                cases[case_path] = parse_case(case_path)
            except (CaseError, OSError) as exc:
                print(f"error: cannot reload case {case_path!r}: {exc}",
                      file=sys.stderr)
                return 1
        case = cases[case_path]
        scen = Scenario(
            name=doc["scenario"]["name"],
            generator_outages=frozenset(doc["scenario"]["generator_outages"]),
            converter_outages=frozenset(doc["scenario"]["converter_outages"]))
        for stage_doc in doc["stages"]:
            if stage_doc["status"] != "converged":
                rows.append([path.name, str(stage_doc["stage"]),
                             stage_doc["status"], MISSING_, MISSING_,
                             "skipped"])
                continue
            system, x = _rebuild_stage(case, scen, stage_doc)
            try:
                rec = verify_solution(system, x)
            except PowerFlowError as exc:
                failures += 1
                rows.append([path.name, str(stage_doc["stage"]),
                             stage_doc["status"], MISSING_, MISSING_,
                             f"power flow failed: {exc}"])
                continue
            verdict = "pass" if rec.passed else "FAIL"
            if not rec.passed:
                failures += 1
            rows.append([path.name, str(stage_doc["stage"]),
                         stage_doc["status"],
                         f"{rec.equations_max_residual:.2e}",
                         f"{rec.max_discrepancy:.2e}", verdict])
    print(to_text_table(rows, "validation verdicts"))
    if failures:
        print(f"{failures} stage(s) failed validation", file=sys.stderr)
        return 1
    return 0


MISSING_ = "-"


def _rebuild_stage(case: NetworkCase, scenario: Scenario, stage_doc: dict):
    """Reconstruct the equation system and state vector of a stored stage.

    Whether the stage ran on the base or the disturbed network is
    recovered by matching the recorded variable names against each
    candidate layout.
    """
    from .case import apply_scenario
    from .equations import ConverterMode

    def build(net):
        settings = {}
        for ctl in stage_doc["controls"]:
            cid = ctl["converter"]
            conv = net.converter(cid)
            if ctl["mode"] == "p_control":
                # stage-1 style: transfers were free; pin them for the check
                settings[cid] = ConverterSetting(
                    mode=ConverterMode.P_FIXED, p_ref=ctl["p_ref"],
                    u_ref=ctl["u_ref"])
            else:
                settings[cid] = ConverterSetting(
                    mode=ConverterMode.DROOP_FIXED, p_ref=ctl["p_ref"],
                    u_ref=ctl["u_ref"], k_droop=ctl["k_droop"],
                    k_min=conv.control.k_min, k_max=conv.control.k_max)
        return OpfEquations(net, settings)

    recorded = set(stage_doc["variables"])
    for net in (case, apply_scenario(case, scenario)):
        try:
            system = build(net)
        except CaseError:
            continue
        if set(system.layout.names) == recorded:
            x = np.array([stage_doc["variables"][name]
                          for name in system.layout.names])
            return system, x
    raise CaseError("stored stage variables match no candidate network")


def cmd_check_case(args) -> int:
    try:
        case = parse_case(args.path)
        warnings = case.validate()
    except CaseError as exc:
        print(f"invalid case: {exc}", file=sys.stderr)
        return 1
    print(f"case:        {case.name}")
    print(f"bases:       S_nom = {case.s_nominal:g} MVA, "
          f"V_dc = {case.v_dc_nominal:g} kV")
    print(f"ac buses:    {len(case.ac_buses)}")
    print(f"generators:  {len(case.generators)}")
    print(f"ac branches: {len(case.ac_branches)}")
    print(f"dc buses:    {len(case.dc_buses)}")
    print(f"dc branches: {len(case.dc_branches)}")
    print(f"converters:  {len(case.converters)}")
    for w in warnings:
        print(f"warning: {w}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "solve":
        return cmd_solve(args)
    if args.command == "validate":
        return cmd_validate(args)
    if args.command == "check-case":
        return cmd_check_case(args)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
