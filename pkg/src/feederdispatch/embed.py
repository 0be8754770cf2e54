"""Assembly of the relaxed dispatch problems as block-structured conic programs.

A :class:`ConicProgram` is written in terms of Hermitian PSD blocks (one per
time slot), small real PSD blocks (2x2 Schur-complement constraints) and
nonnegative scalars (elastic powers, voltage-deviation bounds). It is turned
into the real standard form consumed by :mod:`feederdispatch.solver` through
:func:`real_embedding`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .feeder_model import FeederModel, HorizonScenario
from .network import SystemMatrices
from .solver import StandardForm

EQ, LE = "eq", "le"


class EmbeddingError(ValueError):
    pass


@dataclass
class Constraint:
    kind: str
    rhs: float
    herm: dict[int, sp.coo_matrix] = field(default_factory=dict)
    real: dict[int, np.ndarray] = field(default_factory=dict)
    scal: dict[int, float] = field(default_factory=dict)
    family: str = ""
    key: tuple = ()


@dataclass
class DispatchProblem:
    """Which problem to build and which optional constraint families to add."""

    mode: str = "dispatch"  # "dispatch" or "feasibility"
    thermal: bool = False
    neutral: bool = False
    pcc_pf: bool = False
    node_pf: bool = False
    w_v: float | None = None
    # share one matrix coordinate between the three PCC entries (exact reduction)
    collapse_pcc: bool = True
    node_pf_form: str = "exact"

    def __post_init__(self):
        if self.mode not in ("dispatch", "feasibility"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "dispatch" and self.w_v is not None:
            raise ValueError("w_v only applies to the feasibility problem")
        if self.node_pf_form not in ("exact", "literal"):
            raise ValueError("node_pf_form must be 'exact' or 'literal'")

    @classmethod
    def from_names(cls, names, **kw):
        names = {n.strip() for n in names if n.strip()}
        known = {"thermal", "neutral", "pcc-pf", "node-pf"}
        if names - known:
            raise ValueError(f"unknown constraint families {sorted(names - known)}")
        return cls(thermal="thermal" in names, neutral="neutral" in names,
                   pcc_pf="pcc-pf" in names, node_pf="node-pf" in names, **kw)


@dataclass
class ConicProgram:
    herm_dims: list[int] = field(default_factory=list)
    real_dims: list[int] = field(default_factory=list)
    scalar_names: list[tuple] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)
    obj_herm: dict[int, sp.coo_matrix] = field(default_factory=dict)
    obj_real: dict[int, np.ndarray] = field(default_factory=dict)
    obj_scal: dict[int, float] = field(default_factory=dict)
    obj_constant: float = 0.0
    # slot -> Hermitian block; collapse matrix E (or None); misc bookkeeping
    slot_blocks: list[int] = field(default_factory=list)
    collapse: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    _scalar_index: dict = field(default_factory=dict, repr=False)
    _herm_cache: dict = field(default_factory=dict, repr=False)

    # --- building ------------------------------------------------------

    def add_herm_block(self, n: int) -> int:
        self.herm_dims.append(n)
        return len(self.herm_dims) - 1

    def add_real_block(self, n: int) -> int:
        self.real_dims.append(n)
        return len(self.real_dims) - 1

    def add_scalar(self, name: tuple) -> int:
        if name in self._scalar_index:
            raise ValueError(f"duplicate scalar {name}")
        self._scalar_index[name] = len(self.scalar_names)
        self.scalar_names.append(name)
        return self._scalar_index[name]

    def scalar(self, name: tuple) -> int:
        return self._scalar_index[name]

    def add(self, kind, rhs, herm=None, real=None, scal=None, family="", key=()):
        c = Constraint(kind, float(rhs), herm or {}, real or {}, scal or {}, family, key)
        self.constraints.append(c)
        return c

    def term(self, phi: np.ndarray) -> sp.coo_matrix:
        """Sparse Hermitian term for a full-size Phi, reduced if the PCC is collapsed."""
        key = id(phi)
        hit = self._herm_cache.get(key)
        if hit is not None and hit[0] is phi:
            return hit[1]
        M = phi if self.collapse is None else self.collapse.T @ phi @ self.collapse
        out = sp.coo_matrix(M)
        out.sum_duplicates()
        self._herm_cache[key] = (phi, out)
        return out

    # --- inspection ----------------------------------------------------

    def family_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.constraints:
            out[c.family] = out.get(c.family, 0) + 1
        return out

    def scalars_named(self, tag: str) -> list[tuple[int, tuple]]:
        return [(i, n) for i, n in enumerate(self.scalar_names) if n[0] == tag]

    def expand(self, X: np.ndarray) -> np.ndarray:
        """Full-size matrix from a (possibly reduced) slot block value."""
        if self.collapse is None:
            return X
        return self.collapse @ X @ self.collapse.T

    def to_standard_form(self) -> StandardForm:
        return real_embedding(self)


# ---------------------------------------------------------------------------
# real embedding


def _check_hermitian(H: sp.coo_matrix, what: str):
    D = (H - H.conj().T).tocoo()
    scale = max(1.0, float(np.abs(H.data).max()) if H.nnz else 1.0)
    if D.nnz and np.abs(D.data).max() > 1e-10 * scale:
        raise EmbeddingError(f"{what}: matrix is not Hermitian")


def embed_matrix(H) -> np.ndarray:
    """M(H) = [[Re H, -Im H], [Im H, Re H]] (dense)."""
    H = np.asarray(H.toarray() if sp.issparse(H) else H)
    return np.block([[H.real, -H.imag], [H.imag, H.real]])


@dataclass
class Layout:
    n_scalar: int
    n_slack: int
    herm_offsets: list[int]
    real_offsets: list[int]
    herm_dims: list[int]
    real_dims: list[int]

    @property
    def l(self):
        return self.n_scalar + self.n_slack


def real_embedding(program: ConicProgram, structure_rows: bool = False) -> StandardForm:
    """Real symmetric standard form of ``program``.

    Hermitian block ``X`` (n x n) becomes a real block ``S`` (2n x 2n) with
    ``Tr(H X) = Tr(M(H) S) / 2``. The coupling pattern ``S11 = S22``,
    ``S21 = -S12`` is not written as equality rows: every coefficient matrix
    commutes with ``J = [[0, -I], [I, 0]]``, so the central path of the
    interior-point method stays in the structured subspace and
    :func:`feederdispatch.recovery.extract_hermitian` averages the pairs.
    Inequality rows receive a nonnegative slack column.
    """
    le_rows = [i for i, c in enumerate(program.constraints) if c.kind == LE]
    ns = len(program.scalar_names)
    l = ns + len(le_rows)
    pos = l
    herm_off, real_off = [], []
    for n in program.herm_dims:
        herm_off.append(pos)
        pos += 4 * n * n
    for n in program.real_dims:
        real_off.append(pos)
        pos += n * n
    N = pos

    def herm_entries(b, H):
        n = program.herm_dims[b]
        o = herm_off[b]
        w = 2 * n
        H = sp.coo_matrix(H)
        p, q, h = H.row, H.col, H.data
        cols = np.concatenate([o + p * w + q, o + (p + n) * w + (q + n), o + p * w + (q + n), o + (p + n) * w + q])
        vals = np.concatenate([h.real, h.real, -h.imag, h.imag]) * 0.5
        keep = vals != 0
        return cols[keep], vals[keep]

    def real_entries(b, R):
        n = program.real_dims[b]
        R = np.asarray(R, dtype=float)
        if R.shape != (n, n) or not np.allclose(R, R.T, atol=1e-12):
            raise EmbeddingError(f"real block {b}: coefficient must be symmetric {n}x{n}")
        p, q = np.nonzero(R)
        return real_off[b] + p * n + q, R[p, q]

    rows, cols, vals = [], [], []
    slack_of = {i: ns + j for j, i in enumerate(le_rows)}
    for i, con in enumerate(program.constraints):
        for b, H in con.herm.items():
            H = sp.coo_matrix(H)
            _check_hermitian(H, f"constraint {i} ({con.family})")
            cc, vv = herm_entries(b, H)
            rows.append(np.full(cc.size, i)); cols.append(cc); vals.append(vv)
        for b, R in con.real.items():
            cc, vv = real_entries(b, R)
            rows.append(np.full(cc.size, i)); cols.append(cc); vals.append(vv)
        if con.scal:
            rows.append(np.full(len(con.scal), i))
            cols.append(np.fromiter(con.scal.keys(), dtype=np.int64))
            vals.append(np.fromiter(con.scal.values(), dtype=float))
        if con.kind == LE:
            rows.append(np.array([i])); cols.append(np.array([slack_of[i]])); vals.append(np.array([1.0]))
    m = len(program.constraints)
    if structure_rows:
        for bi, n in enumerate(program.herm_dims):
            rr, cc, vv = _structure_rows(herm_off[bi], n, m)
            rows.append(rr); cols.append(cc); vals.append(vv)
            m += n * (n + 1)
    if rows:
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, N))
    else:
        A = sp.csr_matrix((m, N))
    b = np.zeros(m)
    b[:len(program.constraints)] = [c.rhs for c in program.constraints]

    c = np.zeros(N)
    for bi, H in program.obj_herm.items():
        _check_hermitian(H, "objective")
        cc, vv = herm_entries(bi, H)
        np.add.at(c, cc, vv)
    for bi, R in program.obj_real.items():
        cc, vv = real_entries(bi, R)
        np.add.at(c, cc, vv)
    for j, v in program.obj_scal.items():
        c[j] += v
    if not np.all(np.isfinite(c)) or not np.all(np.isfinite(b)):
        raise EmbeddingError("non-finite program data")

    form = StandardForm(A, b, c, l, [2 * n for n in program.herm_dims] + list(program.real_dims),
                        [not structure_rows] * len(program.herm_dims) + [False] * len(program.real_dims))
    form.layout = Layout(ns, len(le_rows), herm_off, real_off, list(program.herm_dims), list(program.real_dims))
    return form


def _structure_rows(o, n, m0):
    """Rows ``S11 - S22 = 0`` and ``S12 + S12^T = 0`` (upper triangles) for one block."""
    w = 2 * n
    rows, cols, vals = [], [], []
    r = m0
    for i in range(n):
        for j in range(i, n):
            if i == j:
                ent = [(i, i, 1.0), (i + n, i + n, -1.0)]
            else:
                ent = [(i, j, .5), (j, i, .5), (i + n, j + n, -.5), (j + n, i + n, -.5)]
            for p, q, v in ent:
                rows.append(r); cols.append(o + p * w + q); vals.append(v)
            r += 1
            ent = [(i, n + j, .5), (n + j, i, .5), (j, n + i, .5), (n + i, j, .5)]
            for p, q, v in ent:
                rows.append(r); cols.append(o + p * w + q); vals.append(v)
            r += 1
    return np.array(rows), np.array(cols), np.array(vals)


def split_solution(form: StandardForm, x: np.ndarray):
    """(scalars, embedded Hermitian blocks S, real blocks) from a solution vector."""
    lay = form.layout
    scal = x[: lay.n_scalar]
    herm = [x[o:o + 4 * n * n].reshape(2 * n, 2 * n) for o, n in zip(lay.herm_offsets, lay.herm_dims)]
    real = [x[o:o + n * n].reshape(n, n) for o, n in zip(lay.real_offsets, lay.real_dims)]
    return scal, herm, real


def write_program_text(program: ConicProgram, path) -> None:
    """Sparse text dump of the embedded program for cross-checking with other solvers.

    Block 0 is the diagonal block of scalars, blocks 1.. the real PSD blocks
    (embedded Hermitian blocks first). Lines are ``con block row col value``
    (1-based) in sections ``objective``, ``equalities`` and ``inequalities``,
    each constraint's right-hand side given as ``con 0 0 0 rhs``.
    """
    form = real_embedding(program)
    lay = form.layout
    offsets = [(o, 2 * n) for o, n in zip(lay.herm_offsets, lay.herm_dims)]
    offsets += [(o, n) for o, n in zip(lay.real_offsets, lay.real_dims)]

    def where(col):
        if col < lay.n_scalar:
            return 0, col, col
        for k, (o, w) in enumerate(offsets):
            if o <= col < o + w * w:
                r, c = divmod(col - o, w)
                return k + 1, r, c
        return None

    def lines(tag, vec):
        for col in np.nonzero(vec)[0]:
            loc = where(col)
            if loc is not None and loc[1] <= loc[2]:
                yield f"{tag} {loc[0]} {loc[1] + 1} {loc[2] + 1} {vec[col]:.17g}"

    A = form.A.tocsr()
    with open(path, "w") as fh:
        fh.write(f"blocks {lay.n_scalar} {' '.join(str(w) for _, w in offsets)}\n")
        fh.write("objective\n")
        fh.writelines(s + "\n" for s in lines(0, form.c))
        for section, kind in (("equalities", EQ), ("inequalities", LE)):
            fh.write(section + "\n")
            for i, con in enumerate(program.constraints):
                if con.kind != kind:
                    continue
                row = A.getrow(i).toarray().ravel()
                fh.write(f"{i + 1} 0 0 0 {con.rhs:.17g}\n")
                fh.writelines(s + "\n" for s in lines(i + 1, row))


# ---------------------------------------------------------------------------
# problem assembly


def _check_inputs(model: FeederModel, scenario: HorizonScenario):
    T = scenario.T
    if T < 1:
        raise ValueError("inconsistent scenario length: empty horizon")
    bad = [name for name, arr in (("kappa", scenario.kappa),) if arr.shape != (T,)]
    bad += [f"dg_cost[{k}]" for k, v in scenario.dg_cost.items() if v.shape != (T,)]
    bad += [f"load{k}" for k, v in {**scenario.p_load, **scenario.q_load}.items() if v.shape != (T,)]
    if bad:
        raise ValueError(f"inconsistent scenario length: {', '.join(bad)}")
    for d in model.elastic:
        s, f = d.window
        if not (0 <= s < T and 0 <= f < T):
            raise ValueError(f"elastic window of {d.name} outside horizon")
    for g in model.dg:
        if g.name not in scenario.dg_cost:
            raise ValueError(f"no cost series for DG {g.name}")


def _new_program(mats: SystemMatrices, flags: DispatchProblem) -> ConicProgram:
    prog = ConicProgram()
    prog.collapse = mats.pcc_collapse() if flags.collapse_pcc else None
    n = mats.n if prog.collapse is None else prog.collapse.shape[1]
    prog.slot_blocks = [prog.add_herm_block(n) for _ in range(mats.scenario.T)]
    prog.meta.update(flags=flags, n_full=mats.n)
    return prog


def _anchor(prog: ConicProgram, t: int):
    """PCC block of X_t equal to the all-ones matrix."""
    b = prog.slot_blocks[t]
    n = prog.herm_dims[b]
    if prog.collapse is not None:
        prog.add(EQ, 1.0, {b: sp.coo_matrix(([1.0 + 0j], ([0], [0])), shape=(n, n))}, family="anchor", key=(t, 0, 0))
        return
    for i in range(3):
        prog.add(EQ, 1.0, {b: sp.coo_matrix(([1.0 + 0j], ([i], [i])), shape=(n, n))}, family="anchor", key=(t, i, i))
        for j in range(i + 1, 3):
            re = sp.coo_matrix(([0.5 + 0j, 0.5 + 0j], ([i, j], [j, i])), shape=(n, n))
            im = sp.coo_matrix(([0.5j, -0.5j], ([i, j], [j, i])), shape=(n, n))
            prog.add(EQ, 1.0, {b: re}, family="anchor", key=(t, i, j, "re"))
            prog.add(EQ, 0.0, {b: im}, family="anchor", key=(t, i, j, "im"))


def _elastic_scalars(prog: ConicProgram, model: FeederModel, scenario: HorizonScenario):
    """Scalars for elastic powers plus energy and cap constraints; returns (node, phase, t) -> [idx]."""
    at: dict[tuple, list[int]] = {}
    for di, d in enumerate(model.elastic):
        idx = []
        for t in d.slots(scenario.T):
            j = prog.add_scalar(("elastic", di, t))
            idx.append(j)
            at.setdefault((d.node, d.phase, t), []).append(j)
            if d.cap is not None and math.isfinite(d.cap):
                prog.add(LE, d.cap, scal={j: 1.0}, family="elastic-cap", key=(di, t))
        prog.add(EQ, d.energy, scal={j: scenario.dt_hours for j in idx}, family="elastic-energy", key=(di,))
    return at


def _dg_at(model: FeederModel):
    out = {}
    for g in model.dg:
        for ph in g.phases:
            out[(g.node, ph)] = g
    return out


def _cost_terms(prog, mats, model, scenario, weight=1.0, elastic_at=None):
    """Accumulate the energy cost into the objective (currency units)."""
    dg_at = _dg_at(model)
    elastic_at = elastic_at or {}
    scale = scenario.cost_scale * weight
    for t in range(scenario.T):
        b = prog.slot_blocks[t]
        acc = None
        for ph in model.pcc.phases:
            term = prog.term(mats.phi_p(model.pcc.id, ph, t)) * (scale * scenario.kappa[t])
            acc = term if acc is None else acc + term
        for (node, ph), g in dg_at.items():
            c = scale * scenario.dg_cost[g.name][t]
            acc = acc + prog.term(mats.phi_p(node, ph, t)) * c
            p_load, _ = scenario.load(node, ph, t)
            prog.obj_constant += c * p_load
            for j in elastic_at.get((node, ph, t), []):
                prog.obj_scal[j] = prog.obj_scal.get(j, 0.0) + c
        acc = acc.tocoo()
        acc.sum_duplicates()
        prog.obj_herm[b] = acc if b not in prog.obj_herm else (prog.obj_herm[b] + acc).tocoo()


def _balance_constraints(prog, mats, model, scenario, elastic_at, voltage_bounds):
    dg_at = _dg_at(model)
    for t in range(scenario.T):
        b = prog.slot_blocks[t]
        _anchor(prog, t)
        for node in model.nodes[1:]:
            for ph in node.phases:
                phi_p, phi_q, phi_v = mats.phi(node.id, ph, t)
                p_load, q_load = scenario.load(node.id, ph, t)
                yc = node.susceptance(ph)
                tp = prog.term(phi_p)
                tq = prog.term(phi_q)
                if yc:
                    tq = (tq - prog.term(phi_v) * yc).tocoo()
                el = {j: 1.0 for j in elastic_at.get((node.id, ph, t), [])}
                g = dg_at.get((node.id, ph))
                key = (node.id, ph, t)
                if g is None:
                    prog.add(EQ, -p_load, {b: tp}, scal=el, family="balance-p", key=key)
                    prog.add(EQ, -q_load, {b: tq}, family="balance-q", key=key)
                else:
                    _box(prog, b, tp, el, g.pmin - p_load, g.pmax - p_load, "dg-p", key)
                    _box(prog, b, tq, {}, g.qmin - q_load, g.qmax - q_load, "dg-q", key)
                if voltage_bounds:
                    tv = prog.term(phi_v)
                    prog.add(LE, node.vmax ** 2, {b: tv}, family="voltage", key=key + ("max",))
                    prog.add(LE, -node.vmin ** 2, {b: -tv}, family="voltage", key=key + ("min",))


def _box(prog, b, term, scal, lo, hi, family, key):
    if lo == hi:
        prog.add(EQ, lo, {b: term}, scal=dict(scal), family=family, key=key)
        return
    if math.isfinite(hi):
        prog.add(LE, hi, {b: term}, scal=dict(scal), family=family, key=key + ("max",))
    if math.isfinite(lo):
        prog.add(LE, -lo, {b: -term}, scal={j: -v for j, v in scal.items()}, family=family, key=key + ("min",))


def _optional_families(prog, mats, model, scenario, flags):
    if flags.thermal:
        add_thermal_constraints(prog, mats, model)
    if flags.neutral:
        add_neutral_constraints(prog, mats, model)
    if flags.pcc_pf:
        add_pcc_pf_constraints(prog, mats, scenario)
    if flags.node_pf:
        add_node_pf_constraints(prog, mats, model, scenario, form=flags.node_pf_form)


def assemble_p3(mats: SystemMatrices, model: FeederModel, scenario: HorizonScenario,
                flags: DispatchProblem | None = None) -> ConicProgram:
    """Relaxed economic dispatch: minimum energy cost subject to power balance and limits."""
    flags = flags or DispatchProblem()
    _check_inputs(model, scenario)
    prog = _new_program(mats, flags)
    elastic_at = _elastic_scalars(prog, model, scenario)
    _balance_constraints(prog, mats, model, scenario, elastic_at, voltage_bounds=True)
    _cost_terms(prog, mats, model, scenario, 1.0, elastic_at)
    _optional_families(prog, mats, model, scenario, flags)
    prog.meta["problem"] = "P3"
    return prog


def assemble_p5(mats: SystemMatrices, model: FeederModel, scenario: HorizonScenario,
                w_v: float | None = None, flags: DispatchProblem | None = None) -> ConicProgram:
    """Voltage-profile screening: weighted sum of squared-magnitude deviations and energy cost.

    Each deviation ``d = Tr(Phi_V X) - v_ref^2`` is bounded by a scalar
    ``alpha >= d^2`` through the 2x2 block ``[[alpha, d], [d, 1]] >= 0``.
    Voltage limits are dropped.
    """
    w_v = scenario.w_v if w_v is None else w_v
    if not (0.0 < w_v < 1.0):
        raise ValueError(f"w_v must lie in (0, 1), got {w_v}")
    flags = flags or DispatchProblem()
    _check_inputs(model, scenario)
    prog = _new_program(mats, flags)
    elastic_at = _elastic_scalars(prog, model, scenario)
    _balance_constraints(prog, mats, model, scenario, elastic_at, voltage_bounds=False)
    _cost_terms(prog, mats, model, scenario, w_v, elastic_at)
    vref2 = scenario.v_ref ** 2
    sym12 = np.array([[0.0, 0.5], [0.5, 0.0]])
    for t in range(scenario.T):
        b = prog.slot_blocks[t]
        for node in model.nodes[1:]:
            for ph in node.phases:
                key = (node.id, ph, t)
                a = prog.add_scalar(("alpha",) + key)
                prog.obj_scal[a] = prog.obj_scal.get(a, 0.0) + (1.0 - w_v)
                w = prog.add_real_block(2)
                prog.add(EQ, 0.0, real={w: np.diag([1.0, 0.0])}, scal={a: -1.0}, family="alpha-lmi", key=key + (0,))
                prog.add(EQ, 1.0, real={w: np.diag([0.0, 1.0])}, family="alpha-lmi", key=key + (1,))
                prog.add(EQ, -vref2, {b: -prog.term(mats.phi_v(node.id, ph, t))}, real={w: sym12},
                         family="alpha-lmi", key=key + (2,))
    _optional_families(prog, mats, model, scenario, flags)
    prog.meta.update(problem="P5", w_v=w_v)
    return prog


def add_thermal_constraints(prog: ConicProgram, mats: SystemMatrices, model: FeederModel) -> int:
    """Squared line-current and/or per-phase loss limits for lines that declare them."""
    added = 0
    for li, line in enumerate(model.lines):
        for lim, name in ((line.i_max, "i_max"), (line.p_loss_max, "p_loss_max")):
            if lim is not None and not lim > 0:
                raise ValueError(f"line {line.name}: {name} must be positive")
        if line.i_max is None and line.p_loss_max is None:
            continue
        for t, b in enumerate(prog.slot_blocks):
            for ph in line.phases:
                ti = prog.term(mats.phi_current(li, ph, t))
                if line.i_max is not None and math.isfinite(line.i_max):
                    prog.add(LE, line.i_max ** 2, {b: ti}, family="thermal-current", key=(line.name, ph, t))
                    added += 1
                if line.p_loss_max is not None and math.isfinite(line.p_loss_max):
                    r = mats.loss_resistance(li, ph)
                    prog.add(LE, line.p_loss_max, {b: ti * r}, family="thermal-loss", key=(line.name, ph, t))
                    added += 1
    return added


def add_neutral_constraints(prog: ConicProgram, mats: SystemMatrices, model: FeederModel) -> int:
    added = 0
    for li, line in enumerate(model.lines):
        if not line.i_neutral_max:
            continue
        if line.t_neutral is None:
            raise ValueError(f"line {line.name}: neutral limits need primitive impedance data")
        limits = list(line.i_neutral_max)
        if len(limits) == 1:
            limits = limits * line.neutral_count
        if len(limits) != line.neutral_count:
            raise ValueError(f"line {line.name}: {len(limits)} neutral limits for {line.neutral_count} neutrals")
        for t, b in enumerate(prog.slot_blocks):
            for k, lim in enumerate(limits):
                if lim is None or not math.isfinite(lim):
                    continue
                if not lim > 0:
                    raise ValueError(f"line {line.name}: neutral limit must be positive")
                prog.add(LE, lim ** 2, {b: prog.term(mats.phi_neutral(li, k, t))},
                         family="neutral-current", key=(line.name, k, t))
                added += 1
    return added


def pf_slope(eta: float) -> float:
    """tan(arccos(eta)): largest |Q|/P compatible with power factor eta."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"power factor {eta} outside [0, 1]")
    if eta == 0.0:
        return math.inf
    return math.sqrt(1.0 - eta * eta) / eta


def add_pcc_pf_constraints(prog: ConicProgram, mats: SystemMatrices, scenario: HorizonScenario) -> int:
    """Per-phase minimum power factor at the PCC as two linear inequalities."""
    pcc = mats.model.pcc
    added = 0
    for t, b in enumerate(prog.slot_blocks):
        for k, ph in enumerate(pcc.phases):
            eta = float(scenario.pcc_min_pf[t, k])
            slope = pf_slope(eta)
            if eta == 0.0:
                continue
            tp = prog.term(mats.phi_p(pcc.id, ph, t))
            tq = prog.term(mats.phi_q(pcc.id, ph, t))
            # slope*P - Q >= 0 and slope*P + Q >= 0
            prog.add(LE, 0.0, {b: (tq - tp * slope).tocoo()}, family="pcc-pf", key=(ph, t, "+"))
            prog.add(LE, 0.0, {b: (-tq - tp * slope).tocoo()}, family="pcc-pf", key=(ph, t, "-"))
            added += 2
    return added


def node_pf_bound(p_load: float, eta: float, form: str = "exact") -> float:
    """Upper bound on |deviation| used by the node power-factor LMI."""
    if p_load <= 0:
        raise ValueError("power factor constraint needs a positive active load")
    return p_load * pf_slope(eta) if form == "exact" else p_load / eta


def add_node_pf_constraints(prog: ConicProgram, mats: SystemMatrices, model: FeederModel,
                            scenario: HorizonScenario, form: str = "exact") -> int:
    """Minimum load power factor at capacitor nodes as 2x2 LMIs.

    ``form="exact"`` bounds ``(Q_L - Q_C)^2 <= (P_L tan(arccos eta))^2``,
    i.e. exactly ``P_L / sqrt(P_L^2 + (Q_L - Q_C)^2) >= eta``.
    ``form="literal"`` uses the deviation ``P_L + Q_L - Q_C`` against
    ``(P_L / eta)^2`` instead.
    """
    sym12 = np.array([[0.0, 0.5], [0.5, 0.0]])
    added = 0
    for node in model.nodes[1:]:
        eta = node.min_pf
        if eta <= 0:
            continue
        for t, b in enumerate(prog.slot_blocks):
            for ph in node.phases:
                p_load, q_load = scenario.load(node.id, ph, t)
                if p_load <= 0:
                    raise ValueError(f"node {node.id}.{ph}: power factor undefined without active load")
                bound = node_pf_bound(p_load, eta, form)
                offset = q_load + (p_load if form == "literal" else 0.0)
                yc = node.susceptance(ph)
                key = (node.id, ph, t)
                w = prog.add_real_block(2)
                prog.add(EQ, bound ** 2, real={w: np.diag([1.0, 0.0])}, family="node-pf", key=key + (0,))
                prog.add(EQ, 1.0, real={w: np.diag([0.0, 1.0])}, family="node-pf", key=key + (1,))
                herm = {b: prog.term(mats.phi_v(node.id, ph, t)) * yc} if yc else {}
                # W12 = offset - yc * |V|^2
                prog.add(EQ, offset, herm, real={w: sym12}, family="node-pf", key=key + (2,))
                added += 1
    return added
