"""Feeder and horizon data types, Kron reduction and input validation.

All electrical quantities held by these types are per-unit. Conversion from
engineering units happens in :mod:`feederdispatch.io`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PHASES = ("a", "b", "c")


class KronReductionError(ValueError):
    pass


def phase_set(phases) -> tuple[str, ...]:
    """Normalise ``"ac"``, ``["c", "a"]`` etc. into the ordered tuple ``("a", "c")``."""
    items = list(phases)
    bad = [p for p in items if p not in PHASES]
    if bad:
        raise ValueError(f"unknown phase(s) {bad}")
    if len(set(items)) != len(items):
        raise ValueError(f"duplicate phase in {phases!r}")
    return tuple(p for p in PHASES if p in items)


def kron_reduce(primitive, phase_count: int):
    """Eliminate neutral conductors from a primitive impedance matrix.

    The first ``phase_count`` rows/columns are the phase conductors, the rest
    neutrals. Returns ``(z_phase, t_neutral)`` with neutral currents given by
    ``t_neutral @ i_phase``.
    """
    z = np.asarray(primitive, dtype=complex)
    if z.ndim != 2 or z.shape[0] != z.shape[1]:
        raise KronReductionError("Kron reduction failed: primitive matrix must be square")
    p = int(phase_count)
    q = z.shape[0] - p
    if p < 1 or q < 0:
        raise KronReductionError(
            f"Kron reduction failed: phase_count={p} incompatible with {z.shape[0]}x{z.shape[0]} primitive"
        )
    if q == 0:
        return z.copy(), np.zeros((0, p), dtype=complex)
    z_pp, z_pn = z[:p, :p], z[:p, p:]
    z_np, z_nn = z[p:, :p], z[p:, p:]
    try:
        cond = np.linalg.cond(z_nn)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        raise KronReductionError("Kron reduction failed: neutral block is singular")
    t_neutral = -np.linalg.solve(z_nn, z_np)
    z_phase = z_pp + z_pn @ t_neutral
    return z_phase, t_neutral


@dataclass
class LineSegment:
    """Pi-model line between two nodes.

    ``z_phase`` and ``y_shunt`` are per-unit and ordered like ``phases``.
    ``t_neutral`` is only present when the line was given as a primitive
    matrix (needed for neutral-current limits).
    """

    from_node: str
    to_node: str
    phases: tuple[str, ...]
    z_phase: np.ndarray
    y_shunt: np.ndarray | None = None
    t_neutral: np.ndarray | None = None
    i_max: float | None = None
    p_loss_max: float | None = None
    i_neutral_max: list[float] | None = None

    def __post_init__(self):
        self.phases = phase_set(self.phases)
        self.z_phase = np.atleast_2d(np.asarray(self.z_phase, dtype=complex))
        n = len(self.phases)
        if self.y_shunt is None:
            self.y_shunt = np.zeros((n, n), dtype=complex)
        else:
            self.y_shunt = np.atleast_2d(np.asarray(self.y_shunt, dtype=complex))
        if self.t_neutral is not None:
            self.t_neutral = np.atleast_2d(np.asarray(self.t_neutral, dtype=complex))

    @classmethod
    def from_primitive(cls, from_node, to_node, phases, primitive, y_shunt=None, **limits):
        phases = phase_set(phases)
        z_phase, t_neutral = kron_reduce(primitive, len(phases))
        return cls(from_node, to_node, phases, z_phase, y_shunt,
                   t_neutral=t_neutral if t_neutral.shape[0] else None, **limits)

    @property
    def neutral_count(self) -> int:
        return 0 if self.t_neutral is None else self.t_neutral.shape[0]

    @property
    def name(self) -> str:
        return f"{self.from_node}-{self.to_node}"


@dataclass
class NodeSpec:
    id: str
    phases: tuple[str, ...]
    vmin: float = 0.95
    vmax: float = 1.05
    capacitor: dict[str, float] = field(default_factory=dict)
    # switchable bank: per-level dict phase -> susceptance, level 0 first
    switch_levels: list[dict[str, float]] | None = None
    min_pf: float = 0.0

    def __post_init__(self):
        self.phases = phase_set(self.phases)

    def susceptance(self, phase: str) -> float:
        return float(self.capacitor.get(phase, 0.0))


@dataclass
class DgUnit:
    node: str
    phases: tuple[str, ...]
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    name: str = ""

    def __post_init__(self):
        self.phases = phase_set(self.phases)
        if not self.name:
            self.name = f"dg@{self.node}"


@dataclass
class ElasticLoad:
    """Deferrable load with an energy target over a window of 0-based slots.

    ``window = (s, f)`` is inclusive. ``s > f`` denotes a window that wraps
    around the end of the horizon (e.g. overnight charging on a daily horizon).
    ``cap`` of ``None`` means uncapped.
    """

    node: str
    phase: str
    energy: float
    window: tuple[int, int]
    cap: float | None = None
    name: str = ""

    def __post_init__(self):
        (self.phase,) = phase_set(self.phase)
        self.window = (int(self.window[0]), int(self.window[1]))
        if not self.name:
            self.name = f"elastic@{self.node}.{self.phase}"

    def slots(self, horizon: int) -> list[int]:
        s, f = self.window
        if s <= f:
            return list(range(s, f + 1))
        return list(range(s, horizon)) + list(range(0, f + 1))


@dataclass
class HorizonScenario:
    """Time grid, prices, loads and PCC conditions. Series are indexed by slot."""

    T: int
    dt_hours: float
    kappa: np.ndarray
    dg_cost: dict[str, np.ndarray]
    # (node, phase) -> arrays of length T
    p_load: dict[tuple[str, str], np.ndarray]
    q_load: dict[tuple[str, str], np.ndarray]
    pcc_vmag: np.ndarray  # (T, 3)
    pcc_angle_deg: np.ndarray  # (T, 3)
    pcc_min_pf: np.ndarray  # (T, 3), 0 disables
    w_v: float = 0.5
    v_ref: float = 1.0
    # scales per-unit cost terms into currency (per-unit power -> MW times hours)
    cost_scale: float = 1.0

    def __post_init__(self):
        T = self.T
        self.kappa = np.asarray(self.kappa, dtype=float).reshape(-1)
        self.dg_cost = {k: np.broadcast_to(np.asarray(v, float), (T,)).copy() for k, v in self.dg_cost.items()}
        self.p_load = {k: np.asarray(v, float).reshape(-1) for k, v in self.p_load.items()}
        self.q_load = {k: np.asarray(v, float).reshape(-1) for k, v in self.q_load.items()}
        self.pcc_vmag = np.broadcast_to(np.asarray(self.pcc_vmag, float), (T, 3)).copy()
        self.pcc_angle_deg = np.broadcast_to(np.asarray(self.pcc_angle_deg, float), (T, 3)).copy()
        self.pcc_min_pf = np.broadcast_to(np.asarray(self.pcc_min_pf, float), (T, 3)).copy()

    def pcc_phasors(self, slot: int) -> np.ndarray:
        return self.pcc_vmag[slot] * np.exp(1j * np.deg2rad(self.pcc_angle_deg[slot]))

    def load(self, node: str, phase: str, slot: int) -> tuple[float, float]:
        key = (node, phase)
        p = self.p_load[key][slot] if key in self.p_load else 0.0
        q = self.q_load[key][slot] if key in self.q_load else 0.0
        return float(p), float(q)

    def sliced(self, slots) -> "HorizonScenario":
        """Sub-horizon restricted to ``slots`` (used for quick what-if runs)."""
        idx = np.asarray(list(slots))
        return HorizonScenario(
            T=len(idx), dt_hours=self.dt_hours, kappa=self.kappa[idx],
            dg_cost={k: v[idx] for k, v in self.dg_cost.items()},
            p_load={k: v[idx] for k, v in self.p_load.items()},
            q_load={k: v[idx] for k, v in self.q_load.items()},
            pcc_vmag=self.pcc_vmag[idx], pcc_angle_deg=self.pcc_angle_deg[idx],
            pcc_min_pf=self.pcc_min_pf[idx], w_v=self.w_v, v_ref=self.v_ref,
            cost_scale=self.cost_scale,
        )

    def scaled_loads(self, factor: float) -> "HorizonScenario":
        out = self.sliced(range(self.T))
        out.p_load = {k: v * factor for k, v in out.p_load.items()}
        out.q_load = {k: v * factor for k, v in out.q_load.items()}
        return out


@dataclass
class FeederModel:
    """Radial feeder. ``nodes[0]`` is the PCC."""

    nodes: list[NodeSpec]
    lines: list[LineSegment]
    dg: list[DgUnit] = field(default_factory=list)
    elastic: list[ElasticLoad] = field(default_factory=list)
    base_kva: float = 1000.0
    base_kv: float = 1.0

    @property
    def pcc(self) -> NodeSpec:
        return self.nodes[0]

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def phase_base_kva(self) -> float:
        return self.base_kva / 3.0

    def with_capacitors(self, caps: dict[str, dict[str, float]]) -> "FeederModel":
        """Copy of the feeder with the capacitor susceptances of some nodes replaced."""
        nodes = []
        for n in self.nodes:
            if n.id in caps:
                n = NodeSpec(n.id, n.phases, n.vmin, n.vmax, dict(caps[n.id]), n.switch_levels, n.min_pf)
            nodes.append(n)
        return FeederModel(nodes, self.lines, self.dg, self.elastic, self.base_kva, self.base_kv)


def validate_feeder(model: FeederModel, scenario: HorizonScenario | None = None) -> list[str]:
    """Collect invariant violations of a feeder (and optionally a scenario).

    An empty list means the input is usable. Nothing is raised.
    """
    issues: list[str] = []
    ids = [n.id for n in model.nodes]
    if not ids:
        return ["feeder has no nodes"]
    if len(set(ids)) != len(ids):
        issues.append("duplicate node ids")
    nodes = {n.id: n for n in model.nodes}

    for n in model.nodes:
        if not n.phases:
            issues.append(f"node {n.id}: empty phase set")
        if not (0.0 <= n.vmin < n.vmax):
            issues.append(f"node {n.id}: voltage limits must satisfy 0 <= vmin < vmax")
        if not (0.0 <= n.min_pf <= 1.0):
            issues.append(f"node {n.id}: min_pf outside [0, 1]")
        for ph, b in n.capacitor.items():
            if ph not in n.phases:
                issues.append(f"node {n.id}: capacitor on absent phase {ph}")
            if b < 0:
                issues.append(f"node {n.id}: negative capacitor susceptance")
    if len(model.pcc.phases) != 3:
        issues.append("PCC must be three-phase")

    for ln in model.lines:
        tag = f"line {ln.name}"
        if ln.from_node not in nodes or ln.to_node not in nodes:
            issues.append(f"{tag}: unknown endpoint")
            continue
        if not set(ln.phases) <= set(nodes[ln.from_node].phases) & set(nodes[ln.to_node].phases):
            issues.append(f"{tag}: phase set {''.join(ln.phases)} not contained in endpoint phases")
        k = len(ln.phases)
        if ln.z_phase.shape != (k, k):
            issues.append(f"{tag}: impedance shape {ln.z_phase.shape} does not match {k} phases")
        elif not np.all(np.isfinite(ln.z_phase)) or np.linalg.cond(ln.z_phase) > 1e12:
            issues.append(f"{tag}: impedance matrix not invertible")
        if ln.y_shunt.shape != (k, k):
            issues.append(f"{tag}: shunt admittance shape mismatch")
        for name, lim in (("i_max", ln.i_max), ("p_loss_max", ln.p_loss_max)):
            if lim is not None and not lim > 0:
                issues.append(f"{tag}: {name} must be positive")

    # radiality: tree rooted at the PCC
    if len(model.lines) != len(model.nodes) - 1:
        issues.append(f"not radial: {len(model.lines)} lines for {len(model.nodes)} nodes")
    adj: dict[str, list[str]] = {i: [] for i in ids}
    for ln in model.lines:
        if ln.from_node in adj and ln.to_node in adj:
            adj[ln.from_node].append(ln.to_node)
            adj[ln.to_node].append(ln.from_node)
    seen = {ids[0]}
    stack = [ids[0]]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != len(ids):
        issues.append(f"feeder not connected: unreachable {sorted(set(ids) - seen)}")

    for g in model.dg:
        if g.node not in nodes or not set(g.phases) <= set(nodes[g.node].phases):
            issues.append(f"DG {g.name}: references missing node/phase")
        elif g.node == ids[0]:
            issues.append(f"DG {g.name}: cannot sit at the PCC")
        if g.pmin > g.pmax or g.qmin > g.qmax:
            issues.append(f"DG {g.name}: inverted power limits")

    T = scenario.T if scenario is not None else None
    for d in model.elastic:
        if d.node not in nodes or d.phase not in nodes[d.node].phases:
            issues.append(f"elastic load {d.name}: references missing node/phase")
        if d.node == ids[0]:
            issues.append(f"elastic load {d.name}: cannot sit at the PCC")
        if d.energy < 0:
            issues.append(f"elastic load {d.name}: negative energy")
        if T is not None:
            s, f = d.window
            if not (0 <= s < T and 0 <= f < T):
                issues.append(f"elastic load {d.name}: window outside horizon")
            elif d.cap is not None:
                deliverable = d.cap * scenario.dt_hours * len(d.slots(T))
                if d.energy > deliverable * (1 + 1e-12):
                    issues.append(
                        f"elastic load {d.name}: energy {d.energy:g} exceeds cap x window ({deliverable:g})"
                    )

    if scenario is not None:
        issues.extend(_validate_scenario(model, scenario))
    return issues


def _validate_scenario(model: FeederModel, sc: HorizonScenario) -> list[str]:
    issues = []
    T = sc.T
    if T < 1:
        issues.append("scenario: empty horizon")
        return issues
    if sc.dt_hours <= 0:
        issues.append("scenario: dt_hours must be positive")
    if sc.kappa.shape != (T,) or not np.all(np.isfinite(sc.kappa)):
        issues.append("scenario: kappa must be a finite series of length T")
    for g in model.dg:
        cost = sc.dg_cost.get(g.name)
        if cost is None:
            issues.append(f"scenario: no cost series for DG {g.name}")
        elif cost.shape != (T,) or not np.all(np.isfinite(cost)):
            issues.append(f"scenario: bad cost series for DG {g.name}")
    known = {(n.id, p) for n in model.nodes for p in n.phases}
    for series in (sc.p_load, sc.q_load):
        for key, v in series.items():
            if key not in known:
                issues.append(f"scenario: load on unknown node/phase {key}")
            if v.shape != (T,) or not np.all(np.isfinite(v)):
                issues.append(f"scenario: load series {key} must have length T")
    if np.any(sc.pcc_vmag <= 0):
        issues.append("scenario: PCC voltage magnitude must be positive")
    if np.any((sc.pcc_min_pf < 0) | (sc.pcc_min_pf > 1)):
        issues.append("scenario: PCC minimum PF outside [0, 1]")
    if not (0.0 < sc.w_v < 1.0):
        issues.append("scenario: w_v must lie in (0, 1)")
    if not math.isfinite(sc.v_ref) or sc.v_ref <= 0:
        issues.append("scenario: v_ref must be positive")
    return issues
