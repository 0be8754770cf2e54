"""Independent load-flow checks: Z-bus fixed point and brute-force OPF for tiny feeders."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .feeder_model import FeederModel, HorizonScenario
from .network import build_index, build_system_admittance


class LoadFlowDivergence(RuntimeError):
    def __init__(self, msg, mismatch):
        super().__init__(msg)
        self.mismatch = mismatch


@dataclass
class InjectionSpec:
    """Constant-power injections at the non-PCC rows plus the PCC phasors."""

    s: np.ndarray
    v0: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=complex).reshape(-1)
        self.v0 = np.asarray(self.v0, dtype=complex).reshape(-1)
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.v0))):
            raise ValueError("injections must be finite")


def zbus_fixed_point(Y, injections, v0=None, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Solve ``v_k conj((Y v)_k) = s_k`` for the non-PCC rows by Z-bus iteration.

    ``Y`` is the full admittance matrix (PCC rows first, ``len(v0)`` of them);
    ``injections`` is either an :class:`InjectionSpec` or the vector of
    injected powers for the non-PCC rows. Returns the full voltage vector.
    """
    if isinstance(injections, InjectionSpec):
        s, v0 = injections.s, injections.v0
    else:
        s = np.asarray(injections, dtype=complex).reshape(-1)
        v0 = np.asarray(v0, dtype=complex).reshape(-1)
    Y = np.asarray(Y, dtype=complex)
    k = v0.size
    Y21, Y22 = Y[k:, :k], Y[k:, k:]
    if s.size != Y22.shape[0]:
        raise ValueError(f"{s.size} injections for {Y22.shape[0]} non-PCC rows")
    lu = sla.lu_factor(Y22)
    w = -Y21 @ v0
    v = sla.lu_solve(lu, w)
    for _ in range(max_iter):
        if np.any(v == 0):
            break
        v_new = sla.lu_solve(lu, np.conj(s / v) + w)
        change = np.abs(v_new - v).max() if v.size else 0.0
        v = v_new
        if change < tol:
            break
    full = np.concatenate([v0, v])
    mismatch = float(np.abs(full[k:] * np.conj(Y[k:] @ full) - s).max()) if v.size else 0.0
    if not np.isfinite(mismatch) or mismatch > 10 * tol * max(1.0, np.abs(s).max(initial=0.0)):
        raise LoadFlowDivergence(f"Z-bus iteration did not converge (mismatch {mismatch:.3e})", mismatch)
    return full


def oracle_admittance(model: FeederModel) -> np.ndarray:
    """Network admittance with capacitor banks added as constant shunt susceptances."""
    index = build_index(model)
    Y = build_system_admittance(model, index)
    for node in model.nodes:
        for ph in node.phases:
            b = node.susceptance(ph)
            if b:
                k = index[(node.id, ph)]
                Y[k, k] += 1j * b
    return Y


def validate_slot(model: FeederModel, scenario: HorizonScenario, slot: int, v: np.ndarray,
                  dg_p: dict, dg_q: dict, elastic_power: dict, tol: float = 1e-10):
    """Re-solve the load flow from a recovered schedule; returns (voltages, max |dv|)."""
    index = build_index(model)
    Y = oracle_admittance(model)
    s = np.zeros(len(index) - 3, dtype=complex)
    for (node, ph), k in index.items():
        if k < 3:
            continue
        p, q = scenario.load(node, ph, slot)
        s[k - 3] = -(p + elastic_power.get((node, ph), 0.0)) - 1j * q
    for g in model.dg:
        for j, ph in enumerate(g.phases):
            s[index[(g.node, ph)] - 3] += dg_p[g.name][j] + 1j * dg_q[g.name][j]
    v_lf = zbus_fixed_point(Y, s, scenario.pcc_phasors(slot), tol=tol)
    return v_lf, float(np.abs(v_lf - v).max())


@dataclass
class BruteForceResult:
    feasible: bool
    objective: float
    voltages: np.ndarray | None
    dg_p: dict
    dg_q: dict
    evaluated: int


def brute_force_opf(model: FeederModel, scenario: HorizonScenario, vmag_grid, angle_grid_deg,
                    slot: int = 0, eq_tol: float | None = None, chunk: int = 2_000_000) -> BruteForceResult:
    """Exhaustive grid search over the voltages of at most two non-PCC (node, phase) rows.

    Each grid point fixes every voltage; injections follow from ``v conj(Y v)``.
    A point is feasible when non-generating rows meet their load within
    ``eq_tol`` (default: first-order change of the injection over half a
    grid cell), generating rows stay inside the DG box and magnitudes inside
    the node limits. Elastic loads are not supported.
    """
    if model.elastic:
        raise ValueError("brute_force_opf does not handle elastic loads")
    index = build_index(model)
    rows = [k for k in index.values() if k >= 3]
    if len(rows) > 2:
        raise ValueError("brute_force_opf handles at most two non-PCC phase entries")
    Y = build_system_admittance(model, index)
    keys = {k: key for key, k in index.items()}
    mags = np.asarray(vmag_grid, dtype=float)
    angs = np.deg2rad(np.asarray(angle_grid_deg, dtype=float))
    if eq_tol is None:
        # first-order change of an injection across half a grid cell
        dm = np.max(np.diff(mags)) if mags.size > 1 else 0.0
        da = np.max(np.diff(angs)) if angs.size > 1 else 0.0
        vmax = max(mags.max(), np.abs(scenario.pcc_phasors(slot)).max())
        eq_tol = 2.0 * np.abs(Y).sum(axis=1).max() * vmax * 0.5 * (dm + vmax * da)
    v0 = scenario.pcc_phasors(slot)
    dg_at = {(g.node, ph): (g, j) for g in model.dg for j, ph in enumerate(g.phases)}
    scale = scenario.cost_scale

    best = (math.inf, None)
    count = 0
    per_row = np.array(list(itertools.product(mags, angs)))
    if len(rows) == 1:
        batches = [per_row[:, None, :]]
    else:
        # outer product of the two rows' grids, in chunks
        step = max(1, chunk // len(per_row))
        batches = (np.stack([np.repeat(per_row[i:i + step], len(per_row), axis=0),
                             np.tile(per_row, (min(step, len(per_row) - i), 1))], axis=1)
                   for i in range(0, len(per_row), step))
    for pts in batches:
        npts = pts.shape[0]
        count += npts
        V = np.zeros((npts, Y.shape[0]), dtype=complex)
        V[:, :3] = v0
        for j, k in enumerate(rows):
            V[:, k] = pts[:, j, 0] * np.exp(1j * pts[:, j, 1])
        S = V * np.conj(V @ Y.T)
        ok = np.ones(npts, dtype=bool)
        cost = scale * scenario.kappa[slot] * S[:, :3].real.sum(axis=1)
        for k in rows:
            node_id, ph = keys[k]
            node = model.node(node_id)
            p_load, q_load = scenario.load(node_id, ph, slot)
            vm2 = np.abs(V[:, k]) ** 2
            ok &= (vm2 >= node.vmin ** 2 - 1e-12) & (vm2 <= node.vmax ** 2 + 1e-12)
            yc = node.susceptance(ph)
            if (node_id, ph) in dg_at:
                g, _ = dg_at[(node_id, ph)]
                pg = S[:, k].real + p_load
                qg = S[:, k].imag + q_load - yc * vm2
                # a degenerate box is an equality and gets the same tolerance
                tp = eq_tol if g.pmin == g.pmax else 0.0
                tq = eq_tol if g.qmin == g.qmax else 0.0
                ok &= (pg >= g.pmin - tp) & (pg <= g.pmax + tp) & (qg >= g.qmin - tq) & (qg <= g.qmax + tq)
                cost = cost + scale * scenario.dg_cost[g.name][slot] * pg
            else:
                ok &= np.abs(S[:, k] - (-p_load - 1j * q_load + 1j * yc * vm2)) <= eq_tol
        if ok.any():
            cand = np.where(ok, cost, np.inf)
            i = int(np.argmin(cand))
            if cand[i] < best[0]:
                best = (float(cand[i]), V[i].copy())
    if best[1] is None:
        return BruteForceResult(False, math.inf, None, {}, {}, count)
    v = best[1]
    s = v * np.conj(Y @ v)
    dg_p, dg_q = {}, {}
    for g in model.dg:
        ps, qs = [], []
        for ph in g.phases:
            k = index[(g.node, ph)]
            p_load, q_load = scenario.load(g.node, ph, slot)
            ps.append(s[k].real + p_load)
            qs.append(s[k].imag + q_load - model.node(g.node).susceptance(ph) * abs(v[k]) ** 2)
        dg_p[g.name], dg_q[g.name] = np.array(ps), np.array(qs)
    return BruteForceResult(True, best[0], v, dg_p, dg_q, count)
