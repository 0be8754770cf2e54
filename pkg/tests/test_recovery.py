import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_voltages
from feederdispatch import cases
from feederdispatch.cli import residuals
from feederdispatch.embed import DispatchProblem, embed_matrix
from feederdispatch.network import build_system_matrices
from feederdispatch.pipeline import run
from feederdispatch.recovery import (
    RecoveryError,
    extract_hermitian,
    leading_vector,
    power_factor,
    rank1_check,
    recover_powers,
    recover_voltages,
)
from feederdispatch.solver import SolverConfig


def test_extract_outer_product(rng):
    x = rng.standard_normal(5) + 1j * rng.standard_normal(5)
    X = np.outer(x, x.conj())
    np.testing.assert_allclose(extract_hermitian(embed_matrix(X)), X, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8))
def test_extract_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    X = G @ G.conj().T
    assert np.abs(extract_hermitian(embed_matrix(X)) - X).max() <= 1e-12 * max(1.0, np.abs(X).max())


def test_extract_rejects_asymmetric(rng):
    S = embed_matrix(np.eye(2))
    S[0, 1] += 0.1
    with pytest.raises(RecoveryError):
        extract_hermitian(S)


def test_extract_rejects_broken_pairing():
    S = np.eye(4)
    S[2, 2] = 3.0  # S11 != S22
    with pytest.raises(RecoveryError, match="structure"):
        extract_hermitian(S)
    with pytest.raises(RecoveryError):
        extract_hermitian(np.eye(3))


def test_rank_one_of_outer_product(rng):
    x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    ok, ratio = rank1_check(np.outer(x, x.conj()))
    assert ok and ratio < 1e-15


def test_rank_two_diagonal():
    ok, ratio = rank1_check(np.diag([1.0, 0.5]))
    assert not ok and ratio == pytest.approx(0.5)


def test_degenerate_matrix_not_rank_one():
    ok, ratio = rank1_check(np.zeros((3, 3)))
    assert not ok and ratio == np.inf


def test_leading_vector_phase():
    x = np.array([2.0 * np.exp(0.7j), 1j, -1.0])
    u = leading_vector(np.outer(x, x.conj()))
    assert u[0].imag == pytest.approx(0.0, abs=1e-14) and u[0].real > 0
    np.testing.assert_allclose(np.abs(u), np.abs(x), atol=1e-12)


def test_recover_voltages_round_trip(rng):
    model = cases.three_phase_chain()
    sc = cases.flat_scenario(1, vmag=1.03)
    mats = build_system_matrices(model, sc)
    for _ in range(5):
        x = random_voltages(rng, mats.n)
        x[:3] = 1.0
        v = recover_voltages(np.outer(x, x.conj()), mats, 0)
        assert np.abs(v - mats.a(0) * x).max() < 1e-10


def test_recover_voltages_anchor_error(rng):
    model = cases.three_phase_chain()
    sc = cases.flat_scenario(1)
    mats = build_system_matrices(model, sc)
    x = random_voltages(rng, mats.n)
    x[:3] = [1.0, 1.1, 1.0]
    with pytest.raises(RecoveryError, match="anchoring"):
        recover_voltages(np.outer(x, x.conj()), mats, 0)


def test_flat_no_load_feeder():
    model = cases.two_bus(phase="b")
    sc = cases.flat_scenario(1, vmag=1.01)
    r = run(model, sc)
    sol = r.solution
    assert sol.tight
    np.testing.assert_allclose(sol.voltages[0, 3], sc.pcc_phasors(0)[1], atol=1e-6)
    np.testing.assert_allclose(sol.p_pcc, 0.0, atol=1e-6)
    np.testing.assert_allclose(sol.q_pcc, 0.0, atol=1e-6)


def solved_chain(**flags):
    model = cases.three_phase_chain()
    model.dg.append(cases.DgUnit("n2", "abc", 0.0, 0.15, -0.1, 0.1, name="g"))
    loads = {("n1", "a"): (0.2, 0.05), ("n2", "c"): (0.1, 0.03), ("lat", "b"): (0.05, 0.01)}
    sc = cases.flat_scenario(3, loads=loads, kappa=[20.0, 40.0, 60.0], dg_cost={"g": 35.0}, min_pf=0.8)
    return model, sc, run(model, sc, DispatchProblem(**flags), SolverConfig(tol=1e-9))


def test_recovered_quantities_consistent():
    model, sc, r = solved_chain(pcc_pf=True)
    sol = r.solution
    assert sol.tight
    for t, X in enumerate(sol.X):
        v = sol.voltages[t]
        assert np.abs(np.real(np.diag(X)) * np.abs(r.mats.a(t)) ** 2 - np.abs(v) ** 2).max() < 1e-9
    g = model.dg[0]
    assert np.all(sol.dg_p["g"] <= g.pmax + 1e-6) and np.all(sol.dg_p["g"] >= g.pmin - 1e-6)
    assert np.all(sol.pf_pcc >= 0.8 - 1e-6)
    assert sol.recomputed_objective == pytest.approx(sol.objective, rel=1e-6)
    res = residuals(model, sc, sol.voltages, sol.dg_p, sol.dg_q, sol.elastic, DispatchProblem(pcc_pf=True))
    assert max(res.values()) < 1e-6


def test_dg_dispatch_follows_price():
    _, _, r = solved_chain()
    p = r.solution.dg_p["g"].sum(axis=1)
    # idle below the DG cost, used above it
    assert p[0] < 1e-6
    assert p[2] > 0.1


def test_recover_powers_zero_everything():
    model = cases.two_bus()
    sc = cases.flat_scenario(1)
    mats = build_system_matrices(model, sc)
    v = np.concatenate([sc.pcc_phasors(0), [sc.pcc_phasors(0)[0]]])
    pw = recover_powers(v, mats, model, sc, 0)
    np.testing.assert_allclose(pw["p_pcc"], 0, atol=1e-14)
    np.testing.assert_allclose(pw["q_pcc"], 0, atol=1e-14)
    np.testing.assert_allclose(pw["line_current"]["pcc-n1"], 0, atol=1e-14)


def test_power_factor_conventions():
    np.testing.assert_allclose(power_factor([3.0, 0.0, -3.0], [4.0, 0.0, 4.0]), [0.6, 1.0, -0.6])


def test_ieee13_rank_ratios(ieee13_plain_run):
    sol = ieee13_plain_run.solution
    assert sol.tight
    assert np.all(sol.rank_ratio <= 1e-5)
