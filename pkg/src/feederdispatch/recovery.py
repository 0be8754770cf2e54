"""Rank-one check and extraction of physical quantities from a solved relaxation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import ConicProgram, split_solution
from .feeder_model import FeederModel, HorizonScenario
from .network import SystemMatrices, line_current_rows

DEFAULT_RANK_THRESHOLD = 1e-5


class RecoveryError(ValueError):
    pass


def extract_hermitian(S: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Complex Hermitian matrix represented by the real block ``S = M(X)``.

    Paired sub-blocks are averaged; a structure residual above ``tol``
    (relative to the largest entry) raises :class:`RecoveryError`.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] % 2:
        raise RecoveryError("embedded block must be square with even dimension")
    n = S.shape[0] // 2
    scale = max(1.0, float(np.abs(S).max()))
    S11, S12, S21, S22 = S[:n, :n], S[:n, n:], S[n:, :n], S[n:, n:]
    resid = max(np.abs(S - S.T).max(), np.abs(S11 - S22).max(), np.abs(S12 + S21).max()) / scale
    if resid > tol:
        raise RecoveryError(f"embedding structure residual {resid:.2e} exceeds {tol:g}")
    X = 0.5 * (S11 + S22) + 0.5j * (S21 - S12)
    return 0.5 * (X + X.conj().T)


def rank1_check(X: np.ndarray, threshold: float = DEFAULT_RANK_THRESHOLD) -> tuple[bool, float]:
    """(is_rank1, lambda2 / lambda1) from the two largest eigenvalues."""
    w = np.linalg.eigvalsh(0.5 * (X + X.conj().T))[::-1]
    if w[0] <= 0:
        return False, float("inf")
    ratio = float(max(w[1], 0.0) / w[0]) if w.size > 1 else 0.0
    return ratio <= threshold, ratio


def leading_vector(X: np.ndarray) -> np.ndarray:
    """sqrt(lambda1) * u1 with the phase fixed so the first entry is real positive."""
    w, U = np.linalg.eigh(0.5 * (X + X.conj().T))
    x = np.sqrt(max(w[-1], 0.0)) * U[:, -1]
    if abs(x[0]) > 0:
        x = x * (np.conj(x[0]) / abs(x[0]))
    return x


def recover_voltages(X: np.ndarray, mats: SystemMatrices, slot: int, tol: float = 1e-6) -> np.ndarray:
    """Complex voltages ``D0 x`` from a (numerically) rank-one full-size ``X``."""
    x = leading_vector(X)
    v = mats.a(slot) * x
    v0 = mats.scenario.pcc_phasors(slot)
    resid = float(np.abs(v[:3] - v0).max())
    if resid > tol:
        raise RecoveryError(f"slot {slot}: PCC anchoring residual {resid:.2e} (relaxation artifact)")
    return v


def injections(mats: SystemMatrices, v: np.ndarray) -> np.ndarray:
    """Complex power injected into the network at every (node, phase)."""
    return v * np.conj(mats.Y @ v)


@dataclass
class DispatchSolution:
    problem: str
    status: str
    objective: float
    X: list[np.ndarray]
    rank_ratio: np.ndarray
    tight: bool
    voltages: np.ndarray | None  # (T, n)
    p_pcc: np.ndarray  # (T, 3)
    q_pcc: np.ndarray
    pf_pcc: np.ndarray
    dg_p: dict[str, np.ndarray]  # name -> (T, |phases|)
    dg_q: dict[str, np.ndarray]
    elastic: np.ndarray  # (n_elastic, T)
    line_current: dict[str, np.ndarray]  # name -> (T, |phases|)
    neutral_current: dict[str, np.ndarray]
    vmag_sq: np.ndarray  # diag of X mapped to |V|^2, (T, n)
    alpha: dict[tuple, float] = field(default_factory=dict)
    recomputed_objective: float = float("nan")
    dg_within_demand: np.ndarray | None = None  # per slot: DG output <= total demand
    solver: dict = field(default_factory=dict)

    @property
    def T(self):
        return len(self.X)


def power_factor(p, q):
    p = np.asarray(p, dtype=float)
    s = np.hypot(p, q)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, p / np.where(s > 0, s, 1.0), 1.0)


def recover_powers(v: np.ndarray, mats: SystemMatrices, model: FeederModel, scenario: HorizonScenario,
                   slot: int, elastic_power: dict[tuple[str, str], float] | None = None):
    """Supplied powers at the PCC and DG units plus line/neutral currents for one slot."""
    elastic_power = elastic_power or {}
    s = injections(mats, v)
    idx = mats.index
    pcc = model.pcc
    p0 = np.array([s[idx[(pcc.id, ph)]].real for ph in pcc.phases])
    q0 = np.array([s[idx[(pcc.id, ph)]].imag for ph in pcc.phases])
    dg_p, dg_q = {}, {}
    for g in model.dg:
        ps, qs = [], []
        for ph in g.phases:
            k = idx[(g.node, ph)]
            p_load, q_load = scenario.load(g.node, ph, slot)
            yc = model.node(g.node).susceptance(ph)
            ps.append(s[k].real + p_load + elastic_power.get((g.node, ph), 0.0))
            qs.append(s[k].imag + q_load - yc * abs(v[k]) ** 2)
        dg_p[g.name] = np.array(ps)
        dg_q[g.name] = np.array(qs)
    currents, neutrals = {}, {}
    for line in model.lines:
        i_line = line_current_rows(line, idx) @ v
        currents[line.name] = np.abs(i_line)
        if line.t_neutral is not None:
            neutrals[line.name] = np.abs(line.t_neutral @ i_line)
    return dict(p_pcc=p0, q_pcc=q0, pf_pcc=power_factor(p0, q0), dg_p=dg_p, dg_q=dg_q,
                line_current=currents, neutral_current=neutrals)


def recover_solution(program: ConicProgram, form, result, mats: SystemMatrices,
                     threshold: float = DEFAULT_RANK_THRESHOLD) -> DispatchSolution:
    """Assemble a :class:`DispatchSolution` from a solver result."""
    model, scenario = mats.model, mats.scenario
    T = scenario.T
    scal, herm, real = split_solution(form, result.x)
    X = [program.expand(extract_hermitian(herm[b])) for b in program.slot_blocks]
    ratios = np.array([rank1_check(Xt, threshold)[1] for Xt in X])
    tight = bool(np.all(ratios <= threshold))

    elastic = np.zeros((len(model.elastic), T))
    for j, name in enumerate(program.scalar_names):
        if name[0] == "elastic":
            elastic[name[1], name[2]] = scal[j]
    alpha = {name[1:]: float(scal[j]) for j, name in enumerate(program.scalar_names) if name[0] == "alpha"}

    n = mats.n
    vmag_sq = np.array([np.real(np.diag(Xt)) * np.abs(mats.a(t)) ** 2 for t, Xt in enumerate(X)])
    voltages = np.full((T, n), np.nan, dtype=complex)
    p0 = np.full((T, 3), np.nan)
    q0 = np.full((T, 3), np.nan)
    dg_p = {g.name: np.full((T, len(g.phases)), np.nan) for g in model.dg}
    dg_q = {g.name: np.full((T, len(g.phases)), np.nan) for g in model.dg}
    currents = {ln.name: np.full((T, len(ln.phases)), np.nan) for ln in model.lines}
    neutrals = {ln.name: np.full((T, ln.neutral_count), np.nan) for ln in model.lines if ln.t_neutral is not None}
    for t in range(T):
        try:
            v = recover_voltages(X[t], mats, t)
        except RecoveryError:
            # not tight: keep PCC powers from the relaxed matrix itself
            for k, ph in enumerate(model.pcc.phases):
                p0[t, k] = float(np.real(np.sum(mats.phi_p(model.pcc.id, ph, t) * X[t].T)))
                q0[t, k] = float(np.real(np.sum(mats.phi_q(model.pcc.id, ph, t) * X[t].T)))
            continue
        voltages[t] = v
        el = {}
        for di, d in enumerate(model.elastic):
            el[(d.node, d.phase)] = el.get((d.node, d.phase), 0.0) + elastic[di, t]
        pw = recover_powers(v, mats, model, scenario, t, el)
        p0[t], q0[t] = pw["p_pcc"], pw["q_pcc"]
        for g in model.dg:
            dg_p[g.name][t] = pw["dg_p"][g.name]
            dg_q[g.name][t] = pw["dg_q"][g.name]
        for name, val in pw["line_current"].items():
            currents[name][t] = val
        for name, val in pw["neutral_current"].items():
            neutrals[name][t] = val

    cost = scenario.cost_scale * (
        np.sum(scenario.kappa * p0.sum(axis=1))
        + sum(np.sum(scenario.dg_cost[g.name] * dg_p[g.name].sum(axis=1)) for g in model.dg)
    )
    demand = np.array([
        sum(scenario.load(node.id, ph, t)[0] for node in model.nodes[1:] for ph in node.phases)
        + elastic[:, t].sum()
        for t in range(T)
    ])
    dg_total = np.array([sum(np.nansum(dg_p[g.name][t]) for g in model.dg) for t in range(T)])
    objective = result.primal_objective + program.obj_constant
    return DispatchSolution(
        problem=program.meta.get("problem", ""), status=result.status, objective=float(objective),
        X=X, rank_ratio=ratios, tight=tight, voltages=voltages, p_pcc=p0, q_pcc=q0,
        pf_pcc=power_factor(p0, q0), dg_p=dg_p, dg_q=dg_q, elastic=elastic, line_current=currents,
        neutral_current=neutrals, vmag_sq=vmag_sq, alpha=alpha, recomputed_objective=float(cost),
        dg_within_demand=dg_total <= demand + 1e-9,
        solver=dict(iterations=result.iterations, residuals=result.residuals, wall_time=result.wall_time),
    )
