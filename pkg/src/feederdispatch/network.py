"""System admittance matrix and the Hermitian quadratic-form matrices.

Every quantity the dispatch problem needs (nodal injections, squared voltage
magnitudes, squared line and neutral currents) is written as
``x^H Phi x`` for the normalised voltage vector ``x`` whose PCC entries are
ones, ``v = a0 * x`` with ``a0 = [v_pcc, 1, ..., 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .feeder_model import FeederModel, HorizonScenario, LineSegment


class SingularLineError(ValueError):
    pass


def build_index(model: FeederModel) -> dict[tuple[str, str], int]:
    """Dense row index for every (node, phase), PCC first, in file order."""
    index = {}
    for node in model.nodes:
        for ph in node.phases:
            index[(node.id, ph)] = len(index)
    return index


def _line_inverse(line: LineSegment) -> np.ndarray:
    z = line.z_phase
    if not np.all(np.isfinite(z)) or np.linalg.cond(z) > 1e12:
        raise SingularLineError(f"line {line.name}: phase impedance matrix is singular")
    zinv = np.linalg.inv(z)
    if np.allclose(z, z.T, rtol=1e-12, atol=0.0):
        # reciprocal line: keep Y exactly symmetric despite round-off in the inverse
        zinv = 0.5 * (zinv + zinv.T)
    return zinv


def build_system_admittance(model: FeederModel, index=None) -> np.ndarray:
    """Bus admittance matrix of the pi-model network, one row per (node, phase)."""
    if index is None:
        index = build_index(model)
    n = len(index)
    Y = np.zeros((n, n), dtype=complex)
    for line in model.lines:
        zinv = _line_inverse(line)
        rm = [index[(line.from_node, p)] for p in line.phases]
        rn = [index[(line.to_node, p)] for p in line.phases]
        own = 0.5 * line.y_shunt + zinv
        Y[np.ix_(rm, rm)] += own
        Y[np.ix_(rn, rn)] += own
        Y[np.ix_(rm, rn)] -= zinv
        Y[np.ix_(rn, rm)] -= zinv
    return Y


def scaling_vector(index, v0: np.ndarray) -> np.ndarray:
    """``a0``: PCC phasors on the PCC rows, ones elsewhere."""
    a = np.ones(len(index), dtype=complex)
    a[:3] = v0
    return a


def phi_triplet(Y: np.ndarray, a: np.ndarray, k: int):
    """(Phi_P, Phi_Q, Phi_V) for row ``k`` under PCC scaling ``a``."""
    n = Y.shape[0]
    Yk = np.zeros((n, n), dtype=complex)
    Yk[k, :] = Y[k, :]
    outer = np.conj(a)[:, None] * a[None, :]
    phi_p = 0.5 * (Yk + Yk.conj().T) * outer
    phi_q = 0.5j * (Yk - Yk.conj().T) * outer
    phi_v = np.zeros((n, n), dtype=complex)
    phi_v[k, k] = abs(a[k]) ** 2
    return phi_p, phi_q, phi_v


def line_current_rows(line: LineSegment, index) -> np.ndarray:
    """``B_mn``: maps the full voltage vector to the line's phase currents."""
    zinv = _line_inverse(line)
    B = np.zeros((len(line.phases), len(index)), dtype=complex)
    cm = [index[(line.from_node, p)] for p in line.phases]
    cn = [index[(line.to_node, p)] for p in line.phases]
    B[:, cm] += zinv
    B[:, cn] -= zinv
    return B


def _rank_one(row: np.ndarray, a: np.ndarray) -> np.ndarray:
    w = row * a
    return np.conj(w)[:, None] * w[None, :]


@dataclass
class SystemMatrices:
    """Admittance data plus lazily built, cached Phi matrices.

    Phi matrices only depend on the slot through the PCC phasor, so slots
    with identical PCC voltages share cache entries.
    """

    model: FeederModel
    scenario: HorizonScenario
    index: dict[tuple[str, str], int]
    Y: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    def a(self, slot: int) -> np.ndarray:
        return scaling_vector(self.index, self.scenario.pcc_phasors(slot))

    def _key(self, slot):
        return self.scenario.pcc_phasors(slot).tobytes()

    def _cached(self, key, build):
        if key not in self._cache:
            m = build()
            m.setflags(write=False)
            self._cache[key] = m
        return self._cache[key]

    def row(self, node: str, phase: str) -> int:
        try:
            return self.index[(node, phase)]
        except KeyError:
            raise IndexError(f"no phase {phase!r} at node {node!r}") from None

    def phi(self, node: str, phase: str, slot: int):
        k = self.row(node, phase)
        key = ("pqv", k, self._key(slot))
        if key not in self._cache:
            mats = phi_triplet(self.Y, self.a(slot), k)
            for m in mats:
                m.setflags(write=False)
            self._cache[key] = mats
        return self._cache[key]

    def phi_p(self, node, phase, slot):
        return self.phi(node, phase, slot)[0]

    def phi_q(self, node, phase, slot):
        return self.phi(node, phase, slot)[1]

    def phi_v(self, node, phase, slot):
        return self.phi(node, phase, slot)[2]

    def line(self, line_id) -> LineSegment:
        if isinstance(line_id, LineSegment):
            return line_id
        if isinstance(line_id, int):
            return self.model.lines[line_id]
        for ln in self.model.lines:
            if ln.name == line_id:
                return ln
        raise KeyError(line_id)

    def phi_current(self, line_id, phase: str, slot: int) -> np.ndarray:
        line = self.line(line_id)
        if phase not in line.phases:
            raise IndexError(f"line {line.name} has no phase {phase!r}")
        j = line.phases.index(phase)
        key = ("I", line.name, j, self._key(slot))
        return self._cached(key, lambda: _rank_one(line_current_rows(line, self.index)[j], self.a(slot)))

    def phi_neutral(self, line_id, neutral: int, slot: int) -> np.ndarray:
        line = self.line(line_id)
        if line.t_neutral is None:
            raise ValueError(f"line {line.name} has no neutral conductor data (primitive impedance required)")
        if not 0 <= neutral < line.neutral_count:
            raise IndexError(f"line {line.name} has {line.neutral_count} neutral(s)")
        key = ("N", line.name, neutral, self._key(slot))
        return self._cached(
            key,
            lambda: _rank_one(line.t_neutral[neutral] @ line_current_rows(line, self.index), self.a(slot)),
        )

    def loss_resistance(self, line_id, phase: str) -> float:
        line = self.line(line_id)
        j = line.phases.index(phase)
        return float(np.real(line.z_phase[j, j]))

    def pcc_collapse(self) -> np.ndarray:
        """Real ``E`` with ``x = E x_red``: the three PCC entries share coordinate 0."""
        n = self.n
        E = np.zeros((n, n - 2))
        E[:3, 0] = 1.0
        E[3:, 1:] = np.eye(n - 3)
        return E


def build_system_matrices(model: FeederModel, scenario: HorizonScenario) -> SystemMatrices:
    index = build_index(model)
    return SystemMatrices(model, scenario, index, build_system_admittance(model, index))


# Functional forms of the builders.

def build_phi_triplet(Y, model: FeederModel, scenario: HorizonScenario, node: str, phase: str, slot: int):
    index = build_index(model)
    if (node, phase) not in index:
        raise IndexError(f"no phase {phase!r} at node {node!r}")
    return phi_triplet(np.asarray(Y), scaling_vector(index, scenario.pcc_phasors(slot)), index[(node, phase)])


def build_line_current_matrix(model: FeederModel, scenario: HorizonScenario, line, phase: str, slot: int):
    return build_system_matrices(model, scenario).phi_current(line, phase, slot).copy()


def build_neutral_current_matrix(model: FeederModel, scenario: HorizonScenario, line, neutral: int, slot: int):
    return build_system_matrices(model, scenario).phi_neutral(line, neutral, slot).copy()
