"""Small programmatic feeders used by the tests and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .feeder_model import DgUnit, FeederModel, HorizonScenario, LineSegment, NodeSpec

ABC = ("a", "b", "c")


def flat_scenario(T: int, loads=None, kappa=40.0, dg_cost=None, vmag=1.0, min_pf=0.0, dt_hours=1.0,
                  cost_scale=1.0, **kw) -> HorizonScenario:
    """Scenario with constant series; ``loads`` maps (node, phase) -> (p, q) in per-unit."""
    loads = loads or {}
    return HorizonScenario(
        T=T, dt_hours=dt_hours, kappa=np.broadcast_to(np.asarray(kappa, float), (T,)).copy(),
        dg_cost={k: np.broadcast_to(np.asarray(v, float), (T,)).copy() for k, v in (dg_cost or {}).items()},
        p_load={k: np.full(T, float(v[0])) for k, v in loads.items()},
        q_load={k: np.full(T, float(v[1])) for k, v in loads.items()},
        pcc_vmag=np.full((T, 3), vmag), pcc_angle_deg=np.tile([0.0, -120.0, 120.0], (T, 1)),
        pcc_min_pf=np.full((T, 3), min_pf), cost_scale=cost_scale, **kw,
    )


def two_bus(z=0.01 + 0.03j, phase="a", vmin=0.9, vmax=1.1, dg=None, capacitor=0.0, y_shunt=0.0,
            i_max=None, min_pf=0.0) -> FeederModel:
    """PCC plus one single-phase load bus joined by a single-phase line."""
    nodes = [
        NodeSpec("pcc", ABC, vmin=0.0, vmax=10.0),
        NodeSpec("n1", (phase,), vmin=vmin, vmax=vmax, capacitor={phase: capacitor} if capacitor else {},
                 min_pf=min_pf),
    ]
    line = LineSegment("pcc", "n1", (phase,), np.array([[z]]), np.array([[1j * y_shunt]]), i_max=i_max)
    dgs = [] if dg is None else [DgUnit("n1", (phase,), *dg, name="g1")]
    return FeederModel(nodes, [line], dgs)


def three_phase_chain(n_nodes=3, z_scale=0.02, seed=0, lateral=True) -> FeederModel:
    """Three-phase chain with an optional single-phase lateral; coupled phase impedances."""
    rng = np.random.default_rng(seed)
    nodes = [NodeSpec("pcc", ABC, vmin=0.0, vmax=10.0)]
    lines = []
    for k in range(1, n_nodes):
        nodes.append(NodeSpec(f"n{k}", ABC))
        base = np.full((3, 3), 0.3 + 0.5j) + np.diag(np.full(3, 0.7 + 0.9j))
        z = z_scale * base * (1.0 + 0.1 * rng.random())
        lines.append(LineSegment(nodes[k - 1].id, nodes[k].id, ABC, z, 1j * 1e-3 * np.eye(3)))
    if lateral:
        nodes.append(NodeSpec("lat", ("b",)))
        lines.append(LineSegment("n1", "lat", ("b",), np.array([[z_scale * (1.2 + 1.0j)]])))
    return FeederModel(nodes, lines)


def four_wire(load=(0.3, 0.1), dg=None, i_neutral_max=None, z_scale=0.05) -> FeederModel:
    """PCC and one three-phase node joined by a four-wire line (primitive data, one neutral).

    ``load`` sits on phase a only, so the neutral carries the unbalance.
    ``dg`` is an optional (pmin, pmax, qmin, qmax) unit on phase a.
    """
    zs, zm, zpn, zn = 0.4 + 1.0j, 0.1 + 0.4j, 0.09 + 0.35j, 0.6 + 1.1j
    prim = np.full((4, 4), zm)
    prim[np.arange(3), np.arange(3)] = zs
    prim[:3, 3] = prim[3, :3] = zpn
    prim[3, 3] = zn
    nodes = [NodeSpec("pcc", ABC, vmin=0.0, vmax=10.0), NodeSpec("n1", ABC, vmin=0.9, vmax=1.1)]
    line = LineSegment.from_primitive("pcc", "n1", ABC, prim * z_scale,
                                      i_neutral_max=None if i_neutral_max is None else [i_neutral_max])
    dgs = [] if dg is None else [DgUnit("n1", ("a",), *dg, name="g1")]
    return FeederModel(nodes, [line], dgs)
