"""IEEE 13-node test feeder and the synthetic 24-hour dispatch scenario.

Line configurations 601-607 use the published phase impedance (ohm/mile) and
shunt susceptance (uS/mile) matrices. Simplifications relative to the
published feeder:

* the substation regulator is replaced by a fixed PCC voltage;
* the in-line transformer 633-634 is a per-phase series impedance;
* the closed switch 671-692 is ideal, so 692 is merged into 671;
* spot loads are scaled by ``LOAD_SCALE``;
* every load is constant-power, wye-connected on the named phase; the
  distributed load on 632-671 is lumped at 671.
"""

from __future__ import annotations

import numpy as np

from .profiles import SHAPES, gen_profiles

MILE_FT = 5280.0
BASE_KVA = 5000.0
BASE_KV = 4.16


def _sym(upper):
    """Full symmetric matrix from its upper triangle given row by row."""
    n = len(upper)
    M = np.zeros((n, n), dtype=complex)
    for i, row in enumerate(upper):
        for j, v in enumerate(row):
            M[i, i + j] = M[i + j, i] = v
    return M


CONFIGS = {
    "601": ("abc",
            _sym([[0.3465 + 1.0179j, 0.1560 + 0.5017j, 0.1580 + 0.4236j],
                  [0.3375 + 1.0478j, 0.1535 + 0.3849j], [0.3414 + 1.0348j]]),
            _sym([[6.2998, -1.9958, -1.2595], [5.9597, -0.7417], [5.6386]])),
    "602": ("abc",
            _sym([[0.7526 + 1.1814j, 0.1580 + 0.4236j, 0.1560 + 0.5017j],
                  [0.7475 + 1.1983j, 0.1535 + 0.3849j], [0.7436 + 1.2112j]]),
            _sym([[5.6990, -1.0817, -1.6905], [5.1795, -0.6588], [5.4246]])),
    "603": ("bc",
            _sym([[1.3294 + 1.3471j, 0.2066 + 0.4591j], [1.3238 + 1.3569j]]),
            _sym([[4.7097, -0.8999], [4.6658]])),
    "604": ("ac",
            _sym([[1.3238 + 1.3569j, 0.2066 + 0.4591j], [1.3294 + 1.3471j]]),
            _sym([[4.6658, -0.8999], [4.7097]])),
    "605": ("c", np.array([[1.3292 + 1.3475j]]), np.array([[4.5193]])),
    "606": ("abc",
            _sym([[0.7982 + 0.4463j, 0.3192 + 0.0328j, 0.2849 - 0.0143j],
                  [0.7891 + 0.4041j, 0.3192 + 0.0328j], [0.7982 + 0.4463j]]),
            np.diag([96.8897] * 3)),
    "607": ("a", np.array([[1.3425 + 0.5124j]]), np.array([[88.9912]])),
}

NODE_PHASES = {
    "650": "abc", "632": "abc", "633": "abc", "634": "abc", "645": "bc", "646": "bc",
    "671": "abc", "680": "abc", "684": "ac", "611": "c", "652": "a", "675": "abc",
}

# (from, to, length ft, config); "xfm" is the 500 kVA 633-634 transformer.
# A 50 ft stand-in for the switch makes the 671 and 692 balance rows nearly
# opposite (admittance ~450 p.u.) and costs the solver about five digits.
SEGMENTS = [
    ("650", "632", 2000, "601"),
    ("632", "633", 500, "602"),
    ("633", "634", None, "xfm"),
    ("632", "645", 500, "603"),
    ("645", "646", 300, "603"),
    ("632", "671", 2000, "601"),
    ("671", "684", 300, "604"),
    ("684", "611", 300, "605"),
    ("684", "652", 800, "607"),
    ("671", "680", 1000, "601"),
    ("671", "675", 500, "606"),
]

# transformer impedance 1.1 + j2 % on 500 kVA, restated on the feeder base
XFM_Z_PU = (0.011 + 0.02j) * BASE_KVA / 500.0

# peak spot loads (kW, kvar) per (node, phase)
SPOT_LOADS = {
    ("634", "a"): (160, 110), ("634", "b"): (120, 90), ("634", "c"): (120, 90),
    ("645", "b"): (170, 125),
    ("646", "b"): (230, 132),
    ("652", "a"): (128, 86),
    # 671 carries its own spot load, the lumped 632-671 distributed load and the
    # 692 load (behind the closed switch)
    ("671", "a"): (385 + 17, 220 + 10), ("671", "b"): (385 + 66, 220 + 38),
    ("671", "c"): (385 + 117 + 170, 220 + 68 + 151),
    ("675", "a"): (485, 190), ("675", "b"): (68, 60), ("675", "c"): (290, 212),
    ("611", "c"): (170, 80),
}
COMMERCIAL_NODES = {"671"}

CAPACITORS_KVAR = {"675": {"a": 200, "b": 200, "c": 200}, "611": {"c": 100}}

DG_UNITS = [
    {"name": "dg633", "node": "633", "phases": "a", "pmin": 0, "pmax": 300, "qmin": 0, "qmax": 0},
    {"name": "dg680", "node": "680", "phases": "c", "pmin": 0, "pmax": 500, "qmin": 0, "qmax": 0},
]
DG_COST = 30.0  # $/MWh

PHEV_NODE = "675"
PHEV_COUNT = {"a": 2, "b": 4, "c": 4}
PHEV_KWH = 11.0
PHEV_KW = 4.0
PHEV_WINDOW = (19, 6)  # 1-based slots (slot k is hour k-1 to k), 6 PM to 6 AM, wraps midnight
FLEX_NODE = "671"
FLEX_PHASES = ("a", "b")
FLEX_KWH = 30.0
FLEX_WINDOW = (9, 16)  # 1-based slots, 8 AM to 4 PM

# $/MWh, slot 1 = 00:00-01:00: cheap overnight, above the DG cost from 8 AM to 11 PM
PRICES = np.array([
    25.0, 22.5, 20.0, 16.5, 18.0, 21.5, 26.5, 29.0,
    34.0, 38.0, 41.0, 44.0, 47.0, 50.0, 52.0, 49.0,
    46.0, 55.0, 60.0, 57.0, 48.0, 42.0, 36.0, 27.5,
])

# the published spot loads need the substation regulator; without it they are
# scaled down so the 0.95 p.u. floor is reachable at the evening peak
LOAD_SCALE = 0.7
PCC_VMAG = 1.02
PCC_MIN_PF = 0.8
SEED = 2012


def _cmat(M):
    M = np.asarray(M, dtype=complex)
    return {"re": M.real.round(12).tolist(), "im": M.imag.round(12).tolist()}


def feeder_dict(vmin=0.95, vmax=1.05) -> dict:
    nodes = []
    for nid, ph in NODE_PHASES.items():
        nd = {"id": nid, "phases": ph, "vmin": 0.0 if nid == "650" else vmin,
              "vmax": 10.0 if nid == "650" else vmax, "min_pf": 0.0}
        if nid in CAPACITORS_KVAR:
            nd["capacitor"] = {"unit": "kvar", "kvar_per_phase": CAPACITORS_KVAR[nid]}
        nodes.append(nd)
    lines = []
    for a, b, ft, cfg in SEGMENTS:
        if cfg == "xfm":
            lines.append({"from": a, "to": b, "phases": "abc", "units": "pu",
                          "z_phase": _cmat(np.eye(3) * XFM_Z_PU)})
            continue
        ph, z, bsh = CONFIGS[cfg]
        lines.append({"from": a, "to": b, "phases": ph, "config": cfg, "length": ft / MILE_FT,
                      "z_phase": _cmat(z), "y_shunt": _cmat(1j * bsh * 1e-6)})
    elastic = []
    for ph, count in PHEV_COUNT.items():
        for k in range(count):
            elastic.append({"name": f"phev-{ph}{k + 1}", "node": PHEV_NODE, "phase": ph,
                            "energy_kwh": PHEV_KWH, "window": list(PHEV_WINDOW), "cap_kw": PHEV_KW})
    for ph in FLEX_PHASES:
        elastic.append({"name": f"flex-{ph}", "node": FLEX_NODE, "phase": ph, "energy_kwh": FLEX_KWH,
                        "window": list(FLEX_WINDOW), "cap_kw": None})
    return {"bases": {"kva": BASE_KVA, "kv": BASE_KV}, "nodes": nodes, "lines": lines,
            "dg": [dict(g) for g in DG_UNITS], "elastic": elastic}


def scenario_dict(seed=SEED, std=0.1, pcc_vmag=PCC_VMAG, pcc_min_pf=PCC_MIN_PF, load_scale=LOAD_SCALE) -> dict:
    shapes = {k: SHAPES["commercial" if k[0] in COMMERCIAL_NODES else "residential"] for k in SPOT_LOADS}
    base = {k: (p * load_scale, q * load_scale) for k, (p, q) in SPOT_LOADS.items()}
    series = gen_profiles(base, shapes, seed, std)
    loads: dict = {}
    for (node, ph), (p, q) in series.items():
        loads.setdefault(node, {})[ph] = {"p": np.round(p, 6).tolist(), "q": np.round(q, 6).tolist()}
    T = len(PRICES)
    return {
        "T": T, "dt_hours": 1.0, "kappa": PRICES.tolist(),
        "dg_cost": [[DG_COST] * T for _ in DG_UNITS],
        "loads": loads,
        "pcc": {"vmag": pcc_vmag, "angles_deg": [0.0, -120.0, 120.0]},
        "pcc_min_pf": pcc_min_pf, "w_v": 0.5, "v_ref": 1.0, "seed": seed,
    }
