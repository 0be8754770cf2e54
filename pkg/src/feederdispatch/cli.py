"""Command-line front end: dispatch, feasibility screening, capacitor sweep, validation.

Exit codes: 0 optimal and tight, 2 solved but not tight, 3 infeasible,
4 input error, 5 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ieee13
from .embed import DispatchProblem
from .feeder_model import FeederModel, HorizonScenario, validate_feeder
from .io import InputError, load_feeder, load_scenario, load_solution, solution_to_dict, write_json
from .loadflow import LoadFlowDivergence, oracle_admittance, zbus_fixed_point
from .network import build_index, build_system_admittance, line_current_rows
from .pipeline import run
from .profiles import gen_profiles  # noqa: F401  (re-exported for scripts)
from .recovery import DEFAULT_RANK_THRESHOLD, power_factor
from .solver import DUAL_INFEASIBLE, OPTIMAL, PRIMAL_INFEASIBLE, SolverConfig

log = logging.getLogger("feederdispatch")

EXIT_OK, EXIT_NOT_TIGHT, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3, 4, 5
RESIDUAL_FLAG = 1e-6


@dataclass
class RunReport:
    mode: str
    status: str
    objective: float | None = None
    tight: bool | None = None
    rank_ratio: list = field(default_factory=list)
    pcc: list = field(default_factory=list)  # per slot/phase rows
    dg: dict = field(default_factory=dict)
    elastic: dict = field(default_factory=dict)
    voltage_extremes: list = field(default_factory=list)
    validation: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "extra"}
        out.update(self.extra)
        return out


def exit_code_for(status: str, tight: bool | None) -> int:
    if status == OPTIMAL:
        return EXIT_OK if tight else EXIT_NOT_TIGHT
    if status in (PRIMAL_INFEASIBLE, DUAL_INFEASIBLE):
        return EXIT_INFEASIBLE
    return EXIT_SOLVER


# ---------------------------------------------------------------------------
# residual replay, shared by dispatch (fresh solution) and validate (file)


def residuals(model: FeederModel, scenario: HorizonScenario, voltages, dg_p, dg_q, elastic,
              problem: DispatchProblem | None = None) -> dict:
    """Largest violation per constraint family for a schedule given in per-unit."""
    problem = problem or DispatchProblem()
    index = build_index(model)
    Y = build_system_admittance(model, index)
    T = scenario.T
    V = np.asarray(voltages, dtype=complex).reshape(T, len(index))
    if not np.all(np.isfinite(V)):
        raise InputError("solution has no voltages for some slots (relaxation not tight)")
    elastic = np.asarray(elastic, dtype=float).reshape(len(model.elastic), T)
    dg_at = {(g.node, ph): (g, j) for g in model.dg for j, ph in enumerate(g.phases)}
    out = {k: 0.0 for k in ("anchor", "balance-p", "balance-q", "dg-p", "dg-q", "voltage",
                            "elastic-energy", "elastic-cap", "elastic-window", "loadflow")}

    def bump(k, v):
        out[k] = max(out.get(k, 0.0), float(v))

    el_at = np.zeros((T, len(index)))
    for di, d in enumerate(model.elastic):
        window = set(d.slots(T))
        el_at[:, index[(d.node, d.phase)]] += elastic[di]
        bump("elastic-energy", abs(scenario.dt_hours * elastic[di].sum() - d.energy))
        bump("elastic-window", np.abs([elastic[di, t] for t in range(T) if t not in window]).sum())
        bump("elastic-cap", max(0.0, -elastic[di].min()))
        if d.cap is not None:
            bump("elastic-cap", max(0.0, (elastic[di] - d.cap).max()))
    Yo = oracle_admittance(model)
    for t in range(T):
        v = V[t]
        s = v * np.conj(Y @ v)
        bump("anchor", np.abs(v[:3] - scenario.pcc_phasors(t)).max())
        inj = np.zeros(len(index) - 3, dtype=complex)
        for (nid, ph), k in index.items():
            if k < 3:
                continue
            node = model.node(nid)
            p_load, q_load = scenario.load(nid, ph, t)
            vm2 = abs(v[k]) ** 2
            bump("voltage", max(0.0, node.vmin - abs(v[k]), abs(v[k]) - node.vmax))
            p_dem = p_load + el_at[t, k]
            qc = node.susceptance(ph) * vm2
            if (nid, ph) in dg_at:
                g, j = dg_at[(nid, ph)]
                pg, qg = float(dg_p[g.name][t][j]), float(dg_q[g.name][t][j])
                bump("dg-p", abs(s[k].real + p_dem - pg))
                bump("dg-q", abs(s[k].imag + q_load - qc - qg))
                bump("dg-p", max(0.0, g.pmin - pg, pg - g.pmax))
                bump("dg-q", max(0.0, g.qmin - qg, qg - g.qmax))
                inj[k - 3] = pg + 1j * qg - p_dem - 1j * q_load
            else:
                bump("balance-p", abs(s[k].real + p_dem))
                bump("balance-q", abs(s[k].imag + q_load - qc))
                inj[k - 3] = -p_dem - 1j * q_load
        try:
            v_lf = zbus_fixed_point(Yo, inj, scenario.pcc_phasors(t))
            bump("loadflow", np.abs(v_lf - v).max())
        except LoadFlowDivergence as exc:
            bump("loadflow", np.inf)
            log.warning("slot %d: oracle load flow diverged (%s)", t, exc)
        if problem.pcc_pf:
            p0 = np.array([s[i].real for i in range(3)])
            q0 = np.array([s[i].imag for i in range(3)])
            bump("pcc-pf", np.max(np.maximum(0.0, scenario.pcc_min_pf[t] - power_factor(p0, q0))
                                   * (scenario.pcc_min_pf[t] > 0)))
        if problem.thermal:
            for line in model.lines:
                i_abs = np.abs(line_current_rows(line, index) @ v)
                if line.i_max is not None:
                    bump("thermal-current", max(0.0, (i_abs ** 2 - line.i_max ** 2).max()))
                if line.p_loss_max is not None:
                    loss = np.real(np.diag(line.z_phase)) * i_abs ** 2
                    bump("thermal-loss", max(0.0, (loss - line.p_loss_max).max()))
        if problem.neutral:
            for line in model.lines:
                if line.t_neutral is None or not line.i_neutral_max:
                    continue
                i_n = np.abs(line.t_neutral @ (line_current_rows(line, index) @ v))
                lim = np.broadcast_to(np.array(line.i_neutral_max, dtype=float), i_n.shape)
                bump("neutral-current", max(0.0, (i_n ** 2 - lim ** 2).max()))
    return out


# ---------------------------------------------------------------------------
# reports


def _voltage_extremes(model, sol):
    index = build_index(model)
    rows = []
    mags = np.sqrt(np.maximum(sol.vmag_sq, 0.0))
    for t in range(sol.T):
        for ph in "abc":
            ks = [k for (nid, p), k in index.items() if p == ph and k >= 3]
            # a phase may exist only at the PCC (single-phase feeders)
            rows.append({"slot": t + 1, "phase": ph, "vmin_pu": float(mags[t, ks].min()) if ks else None,
                         "vmax_pu": float(mags[t, ks].max()) if ks else None})
    return rows


def _fill_report(rep: RunReport, model, scenario, sol):
    kva = model.phase_base_kva
    rep.objective = sol.objective
    rep.tight = sol.tight
    rep.rank_ratio = sol.rank_ratio.tolist()
    rep.pcc = [
        {"slot": t + 1, "phase": ph, "p_kw": float(sol.p_pcc[t, k] * kva), "q_kvar": float(sol.q_pcc[t, k] * kva),
         "pf": float(sol.pf_pcc[t, k])}
        for t in range(sol.T) for k, ph in enumerate("abc")
    ]
    rep.dg = {g.name: {"phases": "".join(g.phases), "p_kw": (sol.dg_p[g.name] * kva).tolist(),
                       "q_kvar": (sol.dg_q[g.name] * kva).tolist()} for g in model.dg}
    rep.elastic = {d.name: {"node": d.node, "phase": d.phase, "p_kw": (sol.elastic[i] * kva).tolist(),
                            "energy_kwh": float(sol.elastic[i].sum() * scenario.dt_hours * kva)}
                   for i, d in enumerate(model.elastic)}
    rep.voltage_extremes = _voltage_extremes(model, sol)
    rep.extra["recomputed_objective"] = sol.recomputed_objective
    if sol.dg_within_demand is not None:
        rep.extra["dg_within_demand"] = sol.dg_within_demand.tolist()


def write_schedule_csv(path, model, sol):
    kva = model.phase_base_kva
    ext = {(r["slot"], r["phase"]): r for r in _voltage_extremes(model, sol)}
    header = ["slot", "phase", "p_pcc_kw", "q_pcc_kvar", "pf_pcc"]
    for g in model.dg:
        header += [f"{g.name}_p_kw", f"{g.name}_q_kvar"]
    header += ["rank_ratio", "vmin_pu", "vmax_pu"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(sol.T):
            for k, ph in enumerate("abc"):
                row = [t + 1, ph, f"{sol.p_pcc[t, k] * kva:.6f}", f"{sol.q_pcc[t, k] * kva:.6f}",
                       f"{sol.pf_pcc[t, k]:.6f}"]
                for g in model.dg:
                    if ph in g.phases:
                        j = g.phases.index(ph)
                        row += [f"{sol.dg_p[g.name][t, j] * kva:.6f}", f"{sol.dg_q[g.name][t, j] * kva:.6f}"]
                    else:
                        row += ["0.000000", "0.000000"]
                e = ext[(t + 1, ph)]
                row += [f"{sol.rank_ratio[t]:.3e}"] + ["" if e[k] is None else f"{e[k]:.6f}" for k in ("vmin_pu", "vmax_pu")]
                w.writerow(row)


def _config_echo(args, problem):
    return {"tol": args.tol, "rank_threshold": args.rank_threshold, "seed": args.seed,
            "enable": sorted(args.enable), "w_v": problem.w_v if problem.mode == "feasibility" else None,
            "node_pf_form": problem.node_pf_form}


def _load_inputs(args):
    model = load_feeder(args.feeder)
    scenario = load_scenario(args.scenario, model)
    issues = validate_feeder(model, scenario)
    if issues:
        raise InputError("invalid input:\n  " + "\n  ".join(issues))
    return model, scenario


def _solver_config(args):
    return SolverConfig(tol=args.tol, verbose=args.verbose, stream=sys.stderr)


# ---------------------------------------------------------------------------
# commands


def cmd_dispatch(args) -> RunReport:
    model, scenario = _load_inputs(args)
    problem = DispatchProblem.from_names(args.enable, node_pf_form=args.node_pf_form)
    t0 = time.perf_counter()
    r = run(model, scenario, problem, _solver_config(args), args.rank_threshold)
    rep = RunReport("dispatch", r.status, config=_config_echo(args, problem))
    sol = r.solution
    if sol is not None:
        _fill_report(rep, model, scenario, sol)
        if sol.tight:
            rep.validation = residuals(model, scenario, sol.voltages, sol.dg_p, sol.dg_q, sol.elastic, problem)
            rep.extra["flagged_families"] = sorted(k for k, v in rep.validation.items() if v > RESIDUAL_FLAG)
    rep.exit_code = exit_code_for(r.status, sol.tight if sol else None)
    _write_outputs(args, rep, model, sol, time.perf_counter() - t0)
    return rep


def cmd_feasibility(args) -> RunReport:
    model, scenario = _load_inputs(args)
    w_v = scenario.w_v if args.wv is None else args.wv
    problem = DispatchProblem.from_names(args.enable, mode="feasibility", w_v=w_v, node_pf_form=args.node_pf_form)
    t0 = time.perf_counter()
    r = run(model, scenario, problem, _solver_config(args), args.rank_threshold)
    rep = RunReport("feasibility", r.status, config=_config_echo(args, problem))
    sol = r.solution
    flags = []
    if sol is not None:
        _fill_report(rep, model, scenario, sol)
        index = build_index(model)
        mags = np.sqrt(np.maximum(sol.vmag_sq, 0.0))
        for t in range(scenario.T):
            for (nid, ph), k in index.items():
                if k < 3:
                    continue
                node = model.node(nid)
                if mags[t, k] < node.vmin - 1e-9 or mags[t, k] > node.vmax + 1e-9:
                    flags.append({"slot": t + 1, "node": nid, "phase": ph, "vmag_pu": float(mags[t, k])})
    rep.extra.update(voltage_flags=flags, proceed_to_dispatch=bool(sol is not None and not flags))
    rep.exit_code = exit_code_for(r.status, sol.tight if sol else None)
    _write_outputs(args, rep, model, sol, time.perf_counter() - t0)
    return rep


def capacitor_configurations(model: FeederModel):
    """Cartesian product of switch levels, in lexicographic order of level indices."""
    switchable = [n for n in model.nodes if n.switch_levels]
    if not switchable:
        raise InputError("capacitor sweep needs at least one node with switch_levels")
    for combo in itertools.product(*[range(len(n.switch_levels)) for n in switchable]):
        caps = {n.id: n.switch_levels[i] for n, i in zip(switchable, combo)}
        yield combo, [n.id for n in switchable], caps


def cmd_capsweep(args) -> RunReport:
    model, scenario = _load_inputs(args)
    problem = DispatchProblem.from_names(args.enable, node_pf_form=args.node_pf_form)
    configs = list(capacitor_configurations(model))
    t0 = time.perf_counter()

    def one(entry):
        combo, _, caps = entry
        r = run(model.with_capacitors(caps), scenario, problem, _solver_config(args), args.rank_threshold)
        sol = r.solution
        return {"levels": list(combo), "status": r.status,
                "objective": None if sol is None else sol.objective,
                "tight": None if sol is None else sol.tight}

    workers = max(1, min(len(configs), os.cpu_count() or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, configs))
    feasible = [r for r in results if r["status"] == OPTIMAL]
    rep = RunReport("capsweep", "optimal" if feasible else "infeasible", config=_config_echo(args, problem))
    rep.extra["nodes"] = configs[0][1]
    rep.extra["configurations"] = results
    if feasible:
        best_obj = min(r["objective"] for r in feasible)
        # ties within round-off go to the lexicographically first configuration
        best = min((r for r in feasible if r["objective"] <= best_obj + 1e-9 * (1 + abs(best_obj))),
                   key=lambda r: r["levels"])
        rep.objective = best["objective"]
        rep.tight = best["tight"]
        rep.extra["best"] = best
        rep.exit_code = EXIT_OK if best["tight"] else EXIT_NOT_TIGHT
    else:
        rep.extra["best"] = None
        rep.exit_code = EXIT_INFEASIBLE
        log.error("all %d capacitor configurations are infeasible", len(results))
    _write_outputs(args, rep, model, None, time.perf_counter() - t0)
    return rep


def cmd_validate(args) -> RunReport:
    model, scenario = _load_inputs(args)
    if not args.solution:
        raise InputError("validate needs --solution")
    data = load_solution(args.solution)
    problem = DispatchProblem.from_names(args.enable)
    if data["voltages"].shape[0] != scenario.T:
        raise InputError(f"solution has {data['voltages'].shape[0]} slots, scenario {scenario.T}")
    res = residuals(model, scenario, data["voltages"], data["dg_p"], data["dg_q"], data["elastic"], problem)
    flagged = sorted(k for k, v in res.items() if v > RESIDUAL_FLAG)
    rep = RunReport("validate", "ok" if not flagged else "violations", validation=res,
                    config=_config_echo(args, problem))
    rep.extra["flagged_families"] = flagged
    rep.exit_code = EXIT_OK if not flagged else EXIT_NOT_TIGHT
    _write_outputs(args, rep, model, None, 0.0)
    return rep


def cmd_ieee13(args) -> RunReport:
    """Write the shipped IEEE-13 feeder and scenario files (scenario seeded by --seed)."""
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = ieee13.SEED if args.seed is None else args.seed
    write_json(out / "ieee13_feeder.json", ieee13.feeder_dict())
    write_json(out / "ieee13_scenario.json", ieee13.scenario_dict(seed=seed))
    return RunReport("ieee13", "ok", config={"seed": seed})


def _write_outputs(args, rep: RunReport, model, sol, wall):
    if not args.out:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", rep.to_dict())
    # wall time lives apart so the report itself is reproducible byte for byte
    write_json(out / "timing.json", {"wall_time_s": round(wall, 3)})
    if sol is not None:
        write_schedule_csv(out / "schedule.csv", model, sol)
        if sol.tight:
            write_json(out / "solution.json", solution_to_dict(sol, model))


COMMANDS = {"dispatch": cmd_dispatch, "feasibility": cmd_feasibility, "capsweep": cmd_capsweep,
            "validate": cmd_validate, "ieee13": cmd_ieee13}


def build_parser():
    p = argparse.ArgumentParser(prog="feederdispatch", description=__doc__.splitlines()[0])
    p.add_argument("--feeder", help="feeder JSON file")
    p.add_argument("--scenario", help="scenario JSON file")
    p.add_argument("--mode", choices=sorted(COMMANDS), default="dispatch")
    p.add_argument("--out", help="output directory for report.json / schedule.csv / solution.json")
    p.add_argument("--tol", type=float, default=1e-8, help="solver tolerance (default 1e-8)")
    p.add_argument("--rank-threshold", type=float, default=DEFAULT_RANK_THRESHOLD,
                   help="tightness threshold on lambda2/lambda1 (default 1e-5)")
    p.add_argument("--wv", type=float, default=None, help="voltage weight for feasibility mode")
    p.add_argument("--seed", type=int, default=None, help="profile seed (echoed in reports)")
    p.add_argument("--enable", default="", type=lambda s: [x for x in s.split(",") if x.strip()],
                   help="comma list of thermal,neutral,pcc-pf,node-pf")
    p.add_argument("--node-pf-form", choices=("exact", "literal"), default="exact")
    p.add_argument("--solution", help="solution.json to replay (validate mode)")
    p.add_argument("--verbose", action="store_true", help="print the solver iteration log")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DISPATCH_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.mode != "ieee13" and not (args.feeder and args.scenario):
            raise InputError("--feeder and --scenario are required")
        rep = COMMANDS[args.mode](args)
    except (InputError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    line = f"{rep.mode}: {rep.status}"
    if rep.objective is not None:
        line += f", objective {rep.objective:.6f}"
    if rep.tight is not None:
        line += f", tight={rep.tight}"
    print(line)
    return rep.exit_code


if __name__ == "__main__":
    sys.exit(main())
