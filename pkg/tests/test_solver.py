import io

import numpy as np
import pytest
import scipy.sparse as sp

from feederdispatch import cases
from feederdispatch.embed import DispatchProblem, assemble_p3, real_embedding
from feederdispatch.feeder_model import ElasticLoad
from feederdispatch.network import build_system_matrices
from feederdispatch.solver import (
    DUAL_INFEASIBLE,
    OPTIMAL,
    PRIMAL_INFEASIBLE,
    SolverConfig,
    StandardForm,
    solve,
)


def entry(n, i, j):
    """Symmetric coefficient picking X_ij (row-major n*n vector)."""
    E = np.zeros((n, n))
    E[i, j] += 0.5
    E[j, i] += 0.5
    return E.ravel()


def sdp(rows, b, c, l=0, s=(2,)):
    return StandardForm(sp.csr_matrix(np.atleast_2d(rows)), np.asarray(b, float), np.asarray(c, float), l, list(s))


def test_trace_with_fixed_corner():
    form = sdp([entry(2, 0, 0)], [1.0], np.eye(2).ravel())
    r = solve(form)
    assert r.status == OPTIMAL
    assert r.objective == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(r.blocks[0], [[1, 0], [0, 0]], atol=1e-6)


def test_offdiagonal_minimum():
    # min 2 X12 with unit diagonal: X12 = -1
    form = sdp([entry(2, 0, 0), entry(2, 1, 1)], [1, 1], entry(2, 0, 1) * 2)
    r = solve(form, SolverConfig(tol=1e-9))
    assert r.objective == pytest.approx(-2.0, abs=1e-7)
    assert r.dual_objective == pytest.approx(-2.0, abs=1e-7)


def test_small_lp():
    # min -x1 - 2 x2  s.t. x1 + x2 + s = 4, x2 + t = 3
    A = [[1, 1, 1, 0], [0, 1, 0, 1]]
    r = solve(StandardForm(sp.csr_matrix(A), np.array([4.0, 3.0]), np.array([-1.0, -2, 0, 0]), 4, []))
    assert r.status == OPTIMAL
    np.testing.assert_allclose(r.lp, [1, 3, 0, 0], atol=1e-6)
    assert r.objective == pytest.approx(-7.0, abs=1e-6)


def test_psd_infeasible():
    form = sdp([entry(2, 0, 0)], [-1.0], np.eye(2).ravel())
    assert solve(form).status == PRIMAL_INFEASIBLE


def test_dual_infeasible_lp():
    # min -x1 s.t. x1 - x2 = 0 is unbounded below
    form = StandardForm(sp.csr_matrix([[1.0, -1.0]]), np.array([0.0]), np.array([-1.0, 0.0]), 2, [])
    assert solve(form).status == DUAL_INFEASIBLE


def test_elastic_energy_beyond_cap_is_primal_infeasible():
    model = cases.two_bus()
    # validation would refuse this load; assembly accepts it
    model.elastic.append(ElasticLoad("n1", "a", energy=1.0, window=(0, 1), cap=0.2))
    sc = cases.flat_scenario(2, loads={("n1", "a"): (0.1, 0.02)})
    prog = assemble_p3(build_system_matrices(model, sc), model, sc)
    assert solve(real_embedding(prog)).status == PRIMAL_INFEASIBLE


def dispatch_form(seed=0):
    model = cases.three_phase_chain(seed=seed)
    model.dg.append(cases.DgUnit("n2", "ab", 0.0, 0.2, -0.1, 0.1, name="g"))
    loads = {("n1", "a"): (0.2, 0.05), ("n2", "c"): (0.1, 0.03), ("lat", "b"): (0.05, 0.01)}
    sc = cases.flat_scenario(2, loads=loads, kappa=[40.0, 20.0], dg_cost={"g": 30.0})
    prog = assemble_p3(build_system_matrices(model, sc), model, sc, DispatchProblem(pcc_pf=False))
    return real_embedding(prog)


def test_weak_duality_along_iterates():
    form = dispatch_form()
    r = solve(form, SolverConfig(tol=1e-8))
    assert r.status == OPTIMAL
    for rec in r.history:
        assert rec["pobj"] >= rec["dobj"] - rec["weak_duality_slack"] - 1e-8 * (1 + abs(rec["pobj"]))
    # the last iterate is feasible, so the slack term itself is negligible
    assert r.history[-1]["weak_duality_slack"] <= 1e-6 * (1 + abs(r.objective))


def test_complementarity_per_block():
    form = dispatch_form()
    tol = 1e-8
    r = solve(form, SolverConfig(tol=tol))
    for S, Z in zip(r.blocks, r.dual_blocks):
        assert abs(np.sum(S * Z)) <= 10 * tol * (1 + abs(r.objective))
        assert np.linalg.eigvalsh(S).min() >= -10 * tol
    assert np.all(r.lp >= -10 * tol)
    # multipliers come back in the caller's row order
    resid = form.A.T @ r.y + r.z - form.c
    assert np.abs(resid).max() <= 1e-6 * (1 + np.abs(form.c).max())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_row_permutation_invariance(seed):
    form = dispatch_form()
    perm = np.random.default_rng(seed).permutation(form.A.shape[0])
    shuffled = StandardForm(form.A[perm], form.b[perm], form.c, form.l, form.s, form.complex_blocks)
    a = solve(form, SolverConfig(tol=1e-9))
    b = solve(shuffled, SolverConfig(tol=1e-9))
    assert abs(a.objective - b.objective) <= 1e-9 * max(1.0, abs(a.objective)) + 1e-8


def test_deterministic():
    form = dispatch_form()
    a, b = solve(form), solve(form)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.iterations == b.iterations


def test_verbose_log_one_line_per_iteration():
    buf = io.StringIO()
    r = solve(sdp([entry(2, 0, 0)], [1.0], np.eye(2).ravel()), SolverConfig(verbose=True, stream=buf))
    lines = buf.getvalue().splitlines()
    # header, one line per iterate (iteration 0 included), status line
    assert len(lines) == r.iterations + 3
    assert "pres" in lines[0] and lines[-1].startswith("status: optimal")


def test_config_invariants():
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iter=0)


def test_iteration_limit():
    r = solve(dispatch_form(), SolverConfig(max_iter=2))
    assert r.status == "iteration-limit"
    assert r.iterations == 2


def test_standard_form_dimension_check():
    with pytest.raises(ValueError, match="inconsistent"):
        StandardForm(sp.csr_matrix((1, 3)), np.zeros(1), np.zeros(4), 0, [2])
    with pytest.raises(ValueError, match="complex_blocks"):
        StandardForm(sp.csr_matrix((1, 9)), np.zeros(1), np.zeros(9), 0, [3], [True])
