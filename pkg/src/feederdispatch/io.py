"""JSON ingestion of feeder and scenario files and solution (de)serialization.

Units on disk: powers in kW/kvar, energies in kWh, prices in $/MWh,
impedances in ohms (per unit length if ``length`` is given) unless a line
says ``"units": "pu"``. Elastic windows are 1-based and inclusive. A window
with ``s > f`` wraps past the end of the horizon (overnight charging).
Everything is converted to per-unit on a per-phase power base of
``kva / 3`` and a line-to-line voltage base of ``kv``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .feeder_model import (
    DgUnit,
    ElasticLoad,
    FeederModel,
    HorizonScenario,
    LineSegment,
    NodeSpec,
    phase_set,
)


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def _complex_matrix(obj, what):
    if obj is None:
        return None
    try:
        if isinstance(obj, dict):
            re = np.asarray(obj.get("re", 0.0), dtype=float)
            im = np.asarray(obj.get("im", np.zeros_like(re)), dtype=float)
            M = re + 1j * im
        else:
            M = np.asarray(obj, dtype=float)
            M = M[..., 0] + 1j * M[..., 1] if M.ndim == 3 else M.astype(complex)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{what}: cannot read complex matrix ({exc})") from None
    M = np.atleast_2d(M)
    if M.shape[0] != M.shape[1]:
        raise InputError(f"{what}: matrix must be square, got {M.shape}")
    return M


def complex_to_json(M):
    M = np.asarray(M, dtype=complex)
    return {"re": M.real.tolist(), "im": M.imag.tolist()}


class Bases:
    def __init__(self, kva: float, kv: float):
        if not (kva > 0 and kv > 0):
            raise InputError("bases: kva and kv must be positive")
        self.kva = float(kva)
        self.kv = float(kv)

    @property
    def phase_kva(self):
        return self.kva / 3.0

    @property
    def z(self):
        return self.kv ** 2 * 1000.0 / self.kva

    @property
    def amps(self):
        return self.phase_kva / (self.kv / math.sqrt(3.0))

    def power(self, kw):
        return float(kw) / self.phase_kva


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _capacitor(node_obj, bases):
    cap = node_obj.get("capacitor") or {}
    unit = cap.get("unit", "pu")
    if unit not in ("pu", "kvar"):
        raise InputError(f"node {node_obj.get('id')}: capacitor unit must be 'pu' or 'kvar'")

    def conv(d):
        return {ph: (bases.power(v) if unit == "kvar" else float(v)) for ph, v in d.items()}

    levels = cap.get("switch_levels")
    levels = [conv(level) for level in levels] if levels else None
    fixed = cap.get("susceptance_per_phase")
    if fixed is None and unit == "kvar":
        fixed = cap.get("kvar_per_phase")
    fixed = conv(fixed) if fixed else (dict(levels[0]) if levels else {})
    return fixed, levels


def feeder_from_dict(data: dict) -> FeederModel:
    try:
        bases = Bases(**data.get("bases", {"kva": 1000.0, "kv": 1.0}))
        nodes = []
        for nd in data["nodes"]:
            fixed, levels = _capacitor(nd, bases)
            nodes.append(NodeSpec(
                str(nd["id"]), phase_set(nd["phases"]), float(nd.get("vmin", 0.95)),
                float(nd.get("vmax", 1.05)), fixed, levels, float(nd.get("min_pf", 0.0)),
            ))
        lines = [_line(ld, bases) for ld in data.get("lines", [])]
        dgs = [
            DgUnit(str(g["node"]), phase_set(g["phases"]), bases.power(g["pmin"]), bases.power(g["pmax"]),
                   bases.power(g.get("qmin", 0.0)), bases.power(g.get("qmax", 0.0)), g.get("name", ""))
            for g in data.get("dg", [])
        ]
        elastic = []
        for e in data.get("elastic", []):
            s, f = e["window"]
            cap = e.get("cap_kw")
            elastic.append(ElasticLoad(
                str(e["node"]), e["phase"], bases.power(e["energy_kwh"]), (int(s) - 1, int(f) - 1),
                None if cap is None else bases.power(cap), e.get("name", ""),
            ))
    except KeyError as exc:
        raise InputError(f"feeder: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"feeder: {exc}") from None
    return FeederModel(nodes, lines, dgs, elastic, bases.kva, bases.kv)


def _line(ld, bases):
    name = f"{ld['from']}-{ld['to']}"
    phases = phase_set(ld["phases"])
    length = float(ld.get("length", 1.0))
    pu = ld.get("units", "ohm") == "pu"
    zscale = length / (1.0 if pu else bases.z)
    yscale = length * (1.0 if pu else bases.z)
    ysh = _complex_matrix(ld.get("y_shunt"), f"line {name} y_shunt")
    ysh = None if ysh is None else ysh * yscale
    amps = 1.0 if pu else bases.amps
    limits = dict(
        i_max=None if ld.get("i_max") is None else float(ld["i_max"]) / amps,
        p_loss_max=None if ld.get("p_loss_max") is None else (
            float(ld["p_loss_max"]) if pu else bases.power(ld["p_loss_max"])),
        i_neutral_max=None if ld.get("i_neutral_max") is None else [
            None if v is None else float(v) / amps for v in np.atleast_1d(ld["i_neutral_max"]).tolist()],
    )
    if "primitive_z" in ld:
        prim = _complex_matrix(ld["primitive_z"], f"line {name} primitive_z") * zscale
        neutrals = int(ld.get("neutrals", prim.shape[0] - len(phases)))
        if prim.shape[0] != len(phases) + neutrals:
            raise InputError(f"line {name}: primitive size {prim.shape[0]} != phases + neutrals")
        return LineSegment.from_primitive(ld["from"], ld["to"], phases, prim, ysh, **limits)
    if "z_phase" not in ld:
        raise InputError(f"line {name}: needs z_phase or primitive_z")
    z = _complex_matrix(ld["z_phase"], f"line {name} z_phase") * zscale
    return LineSegment(str(ld["from"]), str(ld["to"]), phases, z, ysh, **limits)


def load_feeder(path) -> FeederModel:
    return feeder_from_dict(_read_json(path))


def _series(values, T, what):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(T, float(arr))
    if arr.shape != (T,):
        raise InputError(f"inconsistent scenario length: {what} has shape {arr.shape}, expected ({T},)")
    return arr


def _per_phase(values, T, what):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0 or arr.shape == (3,):
        return np.broadcast_to(arr, (T, 3)).copy()
    if arr.shape == (T,):
        return np.repeat(arr[:, None], 3, axis=1)
    if arr.shape == (T, 3):
        return arr.copy()
    raise InputError(f"inconsistent scenario length: {what} has shape {arr.shape}")


def scenario_from_dict(data: dict, model: FeederModel) -> HorizonScenario:
    bases = Bases(model.base_kva, model.base_kv)
    try:
        T = int(data["T"])
        if T < 1:
            raise InputError("empty horizon: T must be at least 1")
        dt = float(data.get("dt_hours", 1.0))
        kappa = _series(data["kappa"], T, "kappa")
        costs = data.get("dg_cost", [])
        if isinstance(costs, dict):
            dg_cost = {k: _series(v, T, f"dg_cost[{k}]") for k, v in costs.items()}
        else:
            if len(costs) != len(model.dg):
                raise InputError(f"dg_cost has {len(costs)} series for {len(model.dg)} DG units")
            dg_cost = {g.name: _series(v, T, f"dg_cost[{g.name}]") for g, v in zip(model.dg, costs)}
        p_load, q_load = {}, {}
        for node, per in data.get("loads", {}).items():
            for ph, pq in per.items():
                p_load[(str(node), ph)] = _series(pq.get("p", 0.0), T, f"load {node}.{ph} p") / bases.phase_kva
                q_load[(str(node), ph)] = _series(pq.get("q", 0.0), T, f"load {node}.{ph} q") / bases.phase_kva
        pcc = data.get("pcc", {})
        vmag = _per_phase(pcc.get("vmag", 1.0), T, "pcc.vmag")
        ang = _per_phase(pcc.get("angles_deg", [0.0, -120.0, 120.0]), T, "pcc.angles_deg")
        min_pf = _per_phase(data.get("pcc_min_pf", 0.0), T, "pcc_min_pf")
    except KeyError as exc:
        raise InputError(f"scenario: missing field {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"scenario: {exc}") from None
    return HorizonScenario(
        T=T, dt_hours=dt, kappa=kappa, dg_cost=dg_cost, p_load=p_load, q_load=q_load,
        pcc_vmag=vmag, pcc_angle_deg=ang, pcc_min_pf=min_pf, w_v=float(data.get("w_v", 0.5)),
        v_ref=float(data.get("v_ref", 1.0)),
        # $/MWh times per-phase per-unit power: MW per unit is phase_kva / 1000
        cost_scale=bases.phase_kva / 1000.0 * dt,
    )


def load_scenario(path, model: FeederModel) -> HorizonScenario:
    return scenario_from_dict(_read_json(path), model)


# ---------------------------------------------------------------------------
# solution files (per-unit, used by the validate command)


def solution_to_dict(sol, model: FeederModel) -> dict:
    return {
        "problem": sol.problem,
        "status": sol.status,
        "objective": sol.objective,
        "tight": sol.tight,
        "rank_ratio": sol.rank_ratio.tolist(),
        "voltages": complex_to_json(sol.voltages),
        "dg_p": {k: v.tolist() for k, v in sol.dg_p.items()},
        "dg_q": {k: v.tolist() for k, v in sol.dg_q.items()},
        "elastic": sol.elastic.tolist(),
        "p_pcc": sol.p_pcc.tolist(),
        "q_pcc": sol.q_pcc.tolist(),
        "index": [[n.id, ph] for n in model.nodes for ph in n.phases],
    }


def load_solution(path) -> dict:
    if not Path(path).exists():
        raise InputError(f"solution file not found: {path}")
    data = _read_json(path)
    try:
        V = data["voltages"]
        data["voltages"] = np.asarray(V["re"], float) + 1j * np.asarray(V["im"], float)
        data["dg_p"] = {k: np.asarray(v, float) for k, v in data["dg_p"].items()}
        data["dg_q"] = {k: np.asarray(v, float) for k, v in data["dg_q"].items()}
        data["elastic"] = np.asarray(data["elastic"], float).reshape(-1, data["voltages"].shape[0])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed solution file ({exc})") from None
    return data


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=_default)
        fh.write("\n")


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
