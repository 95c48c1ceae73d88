"""Command-line front end: load scenarios, run checks, emit reports.

Six subcommands share one pipeline shape: load the scenario, run the
requested computation, assert its checks, and emit a canonical JSON
report (plus CSV tables on request).  Reports carry no timestamps,
paths, or machine details, so identical inputs give byte-identical
output.  Exit codes: 0 all asserted checks passed, 1 a check failed or
a guarded computation refused to run, 2 an input file would not load.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable

from .expectation import EnumerationBoundError, RootSolveError, constant_driver, classify_ef
from .games import (
    GameCheck,
    SaddleReport,
    brute_force_values,
    epsilon_ratio_ok,
    game_equals_rbsde,
    saddle_points,
    value_identity_applicable,
)
from .lattice import OptionalProcess, Phase, StoppingSystem, semicontinuity
from .reflect import (
    SeparationFailure,
    check_minimality,
    continuity_analogue,
    mokobodzki_witness,
    snell_envelopes,
    solve_rbsde,
    truncation_scheme,
    verify_dynamics,
)
from .report import (
    SOLUTION_ROW_HEADER,
    canonical_json,
    solution_from_dict,
    solution_rows,
    solution_to_dict,
    write_csv_atomic,
    write_json_atomic,
)
from .scenario import DEFAULT_TOLERANCES, Scenario, ScenarioError, load_scenario

__all__ = ["main"]

# residuals of bracketed root solves sit within a small multiple of the
# bracket width, so dynamics checks run at a few times tol_root
_DYNAMICS_SLACK = 4.0


def _tols(scenario: Scenario, args: argparse.Namespace) -> dict[str, float | int]:
    out: dict[str, float | int] = dict(DEFAULT_TOLERANCES)
    out.update(scenario.tolerances)
    for name in DEFAULT_TOLERANCES:
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
    return out


def _system_dict(system: StoppingSystem) -> dict[str, Any]:
    return {"step": system.tau.steps.tolist(),
            "phase": system.tau.phases.tolist(),
            "member": system.membership.tolist()}


def _minimality_dict(rep) -> dict[str, Any]:
    return {"passed": rep.passed, "max_product": rep.max_product,
            "max_overlap": rep.max_overlap, "nonnegative": rep.nonnegative,
            "violations": rep.violations}


def _dynamics_dict(rep) -> dict[str, Any]:
    return {"passed": rep.passed, "max_step_residual": rep.max_step_residual,
            "max_phase_residual": rep.max_phase_residual,
            "max_representation_gap": rep.max_representation_gap,
            "barrier_breach": rep.barrier_breach, "terminal_gap": rep.terminal_gap}


# ---------------------------------------------------------------------------
# command handlers: Scenario + parsed args -> (report dict, csv tables)

CsvTables = dict[str, tuple[tuple[str, ...], list[tuple[Any, ...]]]]


def _cmd_solve(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    sol = solve_rbsde(scn.tree, scn.barriers, scn.driver,
                      tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    mini = check_minimality(sol, scn.barriers, tol_comp=t["tol_comp"])
    dyn = verify_dynamics(sol, scn.barriers, scn.driver, tol=_DYNAMICS_SLACK * t["tol_root"])
    report = {
        "command": "solve",
        "scenario": scn.name,
        "y0": float(sol.y.at[0][0]),
        "solution": solution_to_dict(sol),
        "minimality": _minimality_dict(mini),
        "dynamics": _dynamics_dict(dyn),
        "passed": mini.passed and dyn.passed,
    }
    return report, {"solution": (SOLUTION_ROW_HEADER, solution_rows(sol))}


def _cmd_game(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    values = brute_force_values(scn.tree, scn.barriers, scn.driver, mode=args.mode,
                                theta_step=args.theta_step, theta_node=args.theta_node,
                                enum_bound=int(t["enum_bound"]),
                                tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    sol = solve_rbsde(scn.tree, scn.barriers, scn.driver,
                      tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    y_theta = sol.y.value(args.theta_step, Phase.AT, args.theta_node)
    gap_to_y = max(abs(values.upper - y_theta), abs(values.lower - y_theta))
    if args.mode == "extended":
        passed = gap_to_y <= t["tol_game"]
    else:
        # the plain game still has a value on a finite tree, but that value
        # may differ from Y when the barriers jump the wrong way; only the
        # internal gap is asserted here
        passed = abs(values.gap) <= t["tol_game"]
    report = {
        "command": "game",
        "scenario": scn.name,
        "mode": args.mode,
        "theta": {"step": args.theta_step, "node": args.theta_node},
        "upper": values.upper,
        "lower": values.lower,
        "gap": values.gap,
        "y_theta": y_theta,
        "gap_to_y": gap_to_y,
        "gap_to_y_asserted": args.mode == "extended",
        "identity_applicable": value_identity_applicable(scn.barriers),
        "n_tau": values.n_tau,
        "n_sigma": values.n_sigma,
        "passed": passed,
    }
    tables: CsvTables = {}
    if scn.tree.n_steps - args.theta_step <= 2:
        header = ("tau",) + tuple(f"sigma_{j}" for j in range(values.n_sigma))
        rows = [(i, *[float(v) for v in row]) for i, row in enumerate(values.matrix)]
        tables["matrix"] = (header, rows)
    return report, tables


def _epsilon_dicts(rep: SaddleReport, tol_game: float) -> tuple[list[dict[str, Any]], bool]:
    entries = []
    structural_ok = True
    for es in rep.epsilon_saddles:
        ok = (es.hit_gap_lower == 0.0 and es.hit_gap_upper == 0.0
              and es.reflection_mass_lower == 0.0 and es.reflection_mass_upper == 0.0)
        structural_ok = structural_ok and ok
        entries.append({
            "epsilon": es.epsilon,
            "pair_value": es.pair_value,
            "residual_up": es.residual_up,
            "residual_down": es.residual_down,
            "hit_gap_lower": es.hit_gap_lower,
            "hit_gap_upper": es.hit_gap_upper,
            "reflection_mass_lower": es.reflection_mass_lower,
            "reflection_mass_upper": es.reflection_mass_upper,
            "opponents_checked": es.opponents_checked,
            "structural_ok": ok,
        })
    if len(rep.epsilon_saddles) >= 2 and all(s.opponents_checked for s in rep.epsilon_saddles):
        ratio_ok, quotients = epsilon_ratio_ok(rep.epsilon_saddles, tol=tol_game)
        structural_ok = structural_ok and ratio_ok
        for entry, q in zip(sorted(entries, key=lambda e: -e["epsilon"]), quotients):
            entry["residual_quotient"] = q
    return entries, structural_ok


def _cmd_saddle(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    rep = saddle_points(scn.tree, scn.barriers, scn.driver,
                        theta_step=args.theta_step, theta_node=args.theta_node,
                        enum_bound=int(t["enum_bound"]), epsilons=tuple(args.epsilon or ()),
                        tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    eps_entries, eps_ok = _epsilon_dicts(rep, t["tol_game"])
    contact_tol = _DYNAMICS_SLACK * t["tol_root"]
    contacts_ok = (rep.star_contact_lower <= contact_tol and rep.star_contact_upper <= contact_tol
                   and rep.bar_contact_lower <= contact_tol and rep.bar_contact_upper <= contact_tol)
    passed = rep.passed(t["tol_game"]) and contacts_ok and eps_ok
    report = {
        "command": "saddle",
        "scenario": scn.name,
        "theta": {"step": args.theta_step, "node": args.theta_node},
        "y_theta": rep.y_theta,
        "tau_star": _system_dict(rep.tau_star),
        "sigma_star": _system_dict(rep.sigma_star),
        "tau_bar": {"step": rep.tau_bar.steps.tolist(), "phase": rep.tau_bar.phases.tolist()},
        "sigma_bar": {"step": rep.sigma_bar.steps.tolist(), "phase": rep.sigma_bar.phases.tolist()},
        "order_tau_ok": rep.order_tau_ok,
        "order_sigma_ok": rep.order_sigma_ok,
        "contacts": {"star_lower": rep.star_contact_lower, "star_upper": rep.star_contact_upper,
                     "bar_lower": rep.bar_contact_lower, "bar_upper": rep.bar_contact_upper},
        "residuals": {"star_extended_up": rep.star_extended_up,
                      "star_extended_down": rep.star_extended_down,
                      "bar_extended_up": rep.bar_extended_up,
                      "bar_extended_down": rep.bar_extended_down,
                      "star_plain_up": rep.star_plain_up,
                      "star_plain_down": rep.star_plain_down,
                      "bar_plain_up": rep.bar_plain_up,
                      "bar_plain_down": rep.bar_plain_down},
        "epsilon": eps_entries,
        "warnings": rep.warnings,
        "passed": passed,
    }
    return report, {}


def _load_solution(path: str):
    """Read a dumped solution, unwrapping a full solve report if handed one."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "steps" not in data and isinstance(data.get("solution"), dict):
        data = data["solution"]
    try:
        return solution_from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{path} is not a solution document: {exc}") from exc


def _cmd_verify(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    tree, barriers, driver = scn.tree, scn.barriers, scn.driver
    sol = solve_rbsde(tree, barriers, driver, tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    mini = check_minimality(sol, barriers, tol_comp=t["tol_comp"])
    dyn = verify_dynamics(sol, barriers, driver, tol=_DYNAMICS_SLACK * t["tol_root"])
    cont = continuity_analogue(sol, barriers, tol=_DYNAMICS_SLACK * t["tol_root"])

    lhat, uhat = snell_envelopes(tree, barriers)
    snell_order = max(lhat.max_exceedance(barriers.lower), barriers.upper.max_exceedance(uhat))
    zero = constant_driver(0.0)
    neg_lhat = OptionalProcess.combine(lambda v: -v, lhat)
    snell: dict[str, Any] = {"ordering_violation": max(snell_order, 0.0),
                             "ordering_ok": snell_order <= 0.0}
    for label, proc in (("neg_lower_envelope", neg_lhat), ("upper_envelope", uhat)):
        one = classify_ef(proc, zero, mode="onestep", tol=t["tol_root"])
        entry = {"onestep": one.verdict, "supermartingale": one.is_supermartingale}
        if tree.n_steps <= 3:
            brute = classify_ef(proc, zero, mode="brute", tol=t["tol_root"],
                                enum_bound=int(t["enum_bound"]))
            entry["brute"] = brute.verdict
            entry["supermartingale"] = entry["supermartingale"] and brute.is_supermartingale
        snell[label] = entry
    snell_ok = (snell["ordering_ok"] and snell["neg_lower_envelope"]["supermartingale"]
                and snell["upper_envelope"]["supermartingale"])

    wit = mokobodzki_witness(tree, barriers)
    if isinstance(wit, SeparationFailure):
        lv = barriers.lower.value(wit.step, wit.phase, wit.node)
        uv = barriers.upper.value(wit.step, wit.phase, wit.node)
        witness = {"separated": False,
                   "failure": {"step": wit.step, "phase": int(wit.phase), "node": wit.node,
                               "lower": wit.lower, "upper": wit.upper},
                   "consistent": lv >= uv}
    else:
        sandwich = (barriers.lower.pointwise_leq(wit.x) and wit.x.pointwise_leq(barriers.upper))
        witness = {"separated": True, "cut_count": len(wit.cut_times),
                   "sandwich_ok": sandwich, "consistent": sandwich}
    witness["consistent"] = bool(witness["consistent"])

    oracle: dict[str, Any] = {"checked": False}
    oracle_ok = True
    if tree.n_steps <= max(4, int(t["enum_bound"]) + 1):
        chk = game_equals_rbsde(tree, barriers, driver, enum_bound=int(t["enum_bound"]),
                                tol_game=t["tol_game"], tol_root=t["tol_root"],
                                max_iter=int(t["max_iter"]))
        oracle = {"checked": True, "max_extended_gap": chk.max_extended_gap,
                  "identity_applicable": chk.identity_applicable,
                  "passed": chk.passed_extended, "thetas": len(chk.checks)}
        oracle_ok = chk.passed_extended
    else:
        oracle["note"] = "tree too deep for exhaustive enumeration at this bound"

    round_trip: dict[str, Any] | None = None
    rt_ok = True
    if args.solution is not None:
        reloaded = _load_solution(args.solution)
        r_mini = check_minimality(reloaded, barriers, tol_comp=t["tol_comp"])
        r_dyn = verify_dynamics(reloaded, barriers, driver, tol=_DYNAMICS_SLACK * t["tol_root"])
        drift = reloaded.y.sup_abs_diff(sol.y)
        rt_ok = r_mini.passed and r_dyn.passed and drift == 0.0
        round_trip = {"minimality": _minimality_dict(r_mini), "dynamics": _dynamics_dict(r_dyn),
                      "value_drift": drift, "passed": rt_ok}

    report = {
        "command": "verify",
        "scenario": scn.name,
        "y0": float(sol.y.at[0][0]),
        "minimality": _minimality_dict(mini),
        "dynamics": _dynamics_dict(dyn),
        "continuity": {"passed": cont.passed,
                       "step_contact_lower": cont.step_contact_lower,
                       "step_contact_upper": cont.step_contact_upper,
                       "downward_jump_lower": cont.downward_jump_lower,
                       "upward_jump_upper": cont.upward_jump_upper,
                       "lower_edges_checked": cont.lower_edges_checked,
                       "upper_edges_checked": cont.upper_edges_checked},
        "snell": snell,
        "witness": witness,
        "game_oracle": oracle,
        "passed": (mini.passed and dyn.passed and cont.passed and snell_ok
                   and witness["consistent"] and oracle_ok and rt_ok),
    }
    if round_trip is not None:
        report["round_trip"] = round_trip
    return report, {}


def _cmd_approx(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    rep = truncation_scheme(scn.tree, scn.barriers, scn.driver,
                            n_max=args.n_max, m_max=args.m_max, cut_step=args.cut_step,
                            tol_conv=t["tol_conv"], tol_root=t["tol_root"],
                            max_iter=int(t["max_iter"]))
    report = {
        "command": "approx",
        "scenario": scn.name,
        "n_max": rep.n_max,
        "m_max": rep.m_max,
        "cut_step": rep.cut_step,
        "monotone_n_violation": rep.monotone_n_violation,
        "monotone_m_violation": rep.monotone_m_violation,
        "limit_gap": rep.limit_gap,
        "n_gaps": rep.n_gaps,
        "m_gaps": rep.m_gaps,
        "passed": rep.passed,
    }
    tables: CsvTables = {"convergence": (
        ("stage", "n_gap", "m_gap"),
        [(i + 1, float(a), float(b)) for i, (a, b) in enumerate(zip(rep.n_gaps, rep.m_gaps))])}
    return report, tables


def _cmd_oracle(scn: Scenario, args: argparse.Namespace) -> tuple[dict[str, Any], CsvTables]:
    t = _tols(scn, args)
    include_plain = args.mode == "plain"
    chk: GameCheck = game_equals_rbsde(scn.tree, scn.barriers, scn.driver,
                                       include_plain=include_plain,
                                       enum_bound=int(t["enum_bound"]), tol_game=t["tol_game"],
                                       tol_root=t["tol_root"], max_iter=int(t["max_iter"]))
    passed = chk.passed_extended
    plain: dict[str, Any] | None = None
    if include_plain:
        low_flags = semicontinuity(scn.barriers.lower)
        up_flags = semicontinuity(scn.barriers.upper)
        applicable = low_flags.right_usc and up_flags.right_lsc
        plain = {"internal_gap": chk.max_plain_internal_gap,
                 "gap_to_y": chk.max_plain_to_y_gap,
                 "lower_right_usc": low_flags.right_usc,
                 "upper_right_lsc": up_flags.right_lsc,
                 "gap_to_y_asserted": applicable}
        passed = passed and (chk.max_plain_internal_gap or 0.0) <= t["tol_game"]
        if applicable:
            passed = passed and (chk.max_plain_to_y_gap or 0.0) <= t["tol_game"]
    report = {
        "command": "oracle",
        "scenario": scn.name,
        "mode": args.mode,
        "identity_applicable": chk.identity_applicable,
        "max_extended_gap": chk.max_extended_gap,
        "thetas": [{"step": c.step, "node": c.node, "y": c.y,
                    "upper": c.extended_upper, "lower": c.extended_lower}
                   for c in chk.checks],
        "passed": passed,
    }
    if plain is not None:
        report["plain"] = plain
    return report, {}


_HANDLERS: dict[str, Callable[[Scenario, argparse.Namespace], tuple[dict[str, Any], CsvTables]]] = {
    "solve": _cmd_solve,
    "game": _cmd_game,
    "saddle": _cmd_saddle,
    "verify": _cmd_verify,
    "approx": _cmd_approx,
    "oracle": _cmd_oracle,
}


# ---------------------------------------------------------------------------
# orchestration

def _thread_cap() -> int:
    raw = os.environ.get("RBSDE_LAB_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = 0
    return cap if cap > 0 else min(8, os.cpu_count() or 1)


def _run_one(path: str, args: argparse.Namespace) -> tuple[dict[str, Any], int]:
    name = Path(path).stem
    try:
        scenario = load_scenario(path)
    except (ScenarioError, OSError) as exc:
        return {"command": args.command, "scenario": name,
                "error": str(exc), "passed": False}, 2
    try:
        report, tables = _HANDLERS[args.command](scenario, args)
    except (ScenarioError, OSError) as exc:
        return {"command": args.command, "scenario": scenario.name,
                "error": str(exc), "passed": False}, 2
    except (EnumerationBoundError, RootSolveError, ValueError) as exc:
        return {"command": args.command, "scenario": scenario.name,
                "error": str(exc), "passed": False}, 1
    if args.out is not None:
        out_dir = Path(args.out)
        write_json_atomic(out_dir / f"{scenario.name}.{args.command}.json", report)
        if args.format == "csv":
            for label, (header, rows) in tables.items():
                write_csv_atomic(out_dir / f"{scenario.name}.{args.command}.{label}.csv",
                                 header, rows)
    return report, 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("scenarios", nargs="+", metavar="SCENARIO",
                        help="scenario JSON file(s)")
    common.add_argument("--out", metavar="DIR", default=None,
                        help="write per-scenario reports into this directory")
    common.add_argument("--format", choices=("json", "csv"), default="json",
                        help="also emit CSV tables (requires --out)")
    common.add_argument("--enum-bound", dest="enum_bound", type=int, default=None,
                        help="max subgame depth for strategy enumeration")
    common.add_argument("--max-iter", dest="max_iter", type=int, default=None)
    for flag in ("tol-root", "tol-comp", "tol-conv", "tol-game"):
        common.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=float, default=None)

    theta = argparse.ArgumentParser(add_help=False)
    theta.add_argument("--theta-step", type=int, default=0,
                       help="grid step of the evaluation node")
    theta.add_argument("--theta-node", type=int, default=0,
                       help="node index at that step")

    parser = argparse.ArgumentParser(
        prog="rbsde-lab",
        description="Reflected-BSDE and Dynkin-game verification laboratory "
                    "on finite binary two-phase lattices.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common],
                   help="solve the reflected equation and check minimality")
    game = sub.add_parser("game", parents=[common, theta],
                          help="brute-force game values against the solver")
    game.add_argument("--mode", choices=("extended", "plain"), default="extended")
    saddle = sub.add_parser("saddle", parents=[common, theta],
                            help="construct and verify saddle-point strategies")
    saddle.add_argument("--epsilon", type=float, nargs="*", default=None,
                        help="epsilon values for approximate saddles")
    verify = sub.add_parser("verify", parents=[common],
                            help="run the full invariant suite on a scenario")
    verify.add_argument("--solution", metavar="JSON", default=None,
                        help="re-check a dumped solution (or a solve report) "
                             "against this scenario")
    approx = sub.add_parser("approx", parents=[common],
                            help="monotone truncation scheme convergence report")
    approx.add_argument("--cut-step", dest="cut_step", type=int, default=None,
                        help="steps per artificial barrier stage")
    approx.add_argument("--n-max", dest="n_max", type=int, default=None)
    approx.add_argument("--m-max", dest="m_max", type=int, default=None)
    oracle = sub.add_parser("oracle", parents=[common],
                            help="game-equals-solver sweep over late-step nodes")
    oracle.add_argument("--mode", choices=("extended", "plain"), default="extended")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.format == "csv" and args.out is None:
        build_parser().error("--format csv requires --out")

    paths = list(args.scenarios)
    if len(paths) > 1 and _thread_cap() > 1:
        with ThreadPoolExecutor(max_workers=min(_thread_cap(), len(paths))) as pool:
            results = list(pool.map(lambda p: _run_one(p, args), paths))
    else:
        results = [_run_one(p, args) for p in paths]

    code = 0
    for (report, rc), path in zip(results, paths):
        code = max(code, rc)
        if args.out is None or rc == 2:
            print(canonical_json(report))
        else:
            status = "ok" if rc == 0 else "FAIL"
            print(f"{status} {report['scenario']} ({report['command']})")
    return code


if __name__ == "__main__":
    sys.exit(main())
