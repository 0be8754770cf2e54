"""Primal-dual interior-point solver for real block-structured SDPs.

Standard form::

    minimize    c'x            maximize   b'y
    subject to  A x = b        subject to A'y + z = c
                x in K                    z in K

with ``K`` a product of a nonnegative orthant (the first ``l`` entries of
``x``) and positive semidefinite cones. PSD blocks are stored as full
row-major ``n*n`` vectors, so ``c'x`` is the Frobenius inner product
provided the block parts of ``c`` and the rows of ``A`` are symmetric.

The iteration runs on the homogeneous self-dual embedding (so infeasible
problems end with a Farkas-type certificate rather than diverging), uses
Nesterov-Todd scaling and a Mehrotra predictor-corrector step. The normal
equations ``A W'W A' dy = r`` are formed sparsely and factorised with
SuperLU; the matrix is block diagonal per time slot apart from a few
coupling rows, so fill-in stays small.
"""

from __future__ import annotations

import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"
ITERATION_LIMIT = "iteration-limit"
NUMERICAL_FAILURE = "numerical-failure"

# PSD blocks up to this size use an explicit Kronecker product in the
# normal equations; larger ones use the A_i G trick.
_SMALL_BLOCK = 8


@dataclass
class StandardForm:
    A: sp.csr_matrix
    b: np.ndarray
    c: np.ndarray
    l: int
    s: list[int]
    # blocks that are real embeddings [[R, -I], [I, R]] of Hermitian blocks;
    # iterates are kept in that subspace (exact: data and central path respect it)
    complex_blocks: list[bool] | None = None

    def __post_init__(self):
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.s = [int(n) for n in self.s]
        N = self.l + sum(n * n for n in self.s)
        if self.A.shape != (self.b.size, N) or self.c.size != N:
            raise ValueError(
                f"inconsistent dimensions: A {self.A.shape}, b {self.b.size}, c {self.c.size}, cone size {N}"
            )
        if self.complex_blocks is not None:
            self.complex_blocks = [bool(f) for f in self.complex_blocks]
            if len(self.complex_blocks) != len(self.s) or any(
                    f and n % 2 for f, n in zip(self.complex_blocks, self.s)):
                raise ValueError("complex_blocks must flag even-sized blocks, one flag per block")

    @property
    def offsets(self) -> list[int]:
        out, pos = [], self.l
        for n in self.s:
            out.append(pos)
            pos += n * n
        return out

    def blocks(self, x: np.ndarray) -> list[np.ndarray]:
        return [x[o:o + n * n].reshape(n, n) for o, n in zip(self.offsets, self.s)]


@dataclass
class SolverConfig:
    tol: float = 1e-7
    max_iter: int = 200
    min_step: float = 1e-9
    regularization: float = 1e-13
    refinement: int = 2
    verbose: bool = False
    stream: object = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class SolverResult:
    status: str
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    primal_objective: float
    dual_objective: float
    iterations: int
    residuals: dict
    l: int
    s: list[int]
    history: list[dict] = field(default_factory=list, repr=False)
    wall_time: float = 0.0

    @property
    def objective(self) -> float:
        return self.primal_objective

    def _split(self, v):
        out, pos = [], self.l
        for n in self.s:
            out.append(v[pos:pos + n * n].reshape(n, n))
            pos += n * n
        return out

    @property
    def blocks(self) -> list[np.ndarray]:
        return self._split(self.x)

    @property
    def dual_blocks(self) -> list[np.ndarray]:
        return self._split(self.z)

    @property
    def lp(self) -> np.ndarray:
        return self.x[: self.l]


class _Cone:
    """Index bookkeeping and NT-scaled algebra for orthant x PSD blocks."""

    def __init__(self, l, s):
        self.l = l
        self.s = list(s)
        self.N = l + sum(n * n for n in s)
        self.nu = l + sum(self.s)
        self.groups = {}
        pos = l
        for bi, n in enumerate(self.s):
            self.groups.setdefault(n, []).append((bi, pos))
            pos += n * n
        self.gidx = {
            n: np.array([np.arange(p, p + n * n) for _, p in members], dtype=np.int64).reshape(len(members), n * n)
            for n, members in self.groups.items()
        }

    def identity(self):
        e = np.zeros(self.N)
        e[: self.l] = 1.0
        for n, idx in self.gidx.items():
            e[idx[:, :: n + 1]] = 1.0
        return e

    def mats(self, v, n):
        idx = self.gidx[n]
        return v[idx].reshape(idx.shape[0], n, n)

    def put(self, out, n, M):
        out[self.gidx[n]] = M.reshape(M.shape[0], n * n)

    # --- scaling -------------------------------------------------------

    def nt_scaling(self, x, z):
        W = {"l": None, "s": {}}
        xl, zl = x[: self.l], z[: self.l]
        if self.l:
            if np.any(xl <= 0) or np.any(zl <= 0):
                raise np.linalg.LinAlgError("orthant iterate left the cone")
            W["l"] = (np.sqrt(xl / zl), np.sqrt(xl * zl))
        for n in self.gidx:
            X = _sym(self.mats(x, n))
            Z = _sym(self.mats(z, n))
            Lx = np.linalg.cholesky(X)
            Lz = np.linalg.cholesky(Z)
            U, lam, Vt = np.linalg.svd(np.swapaxes(Lz, 1, 2) @ Lx)
            if np.any(lam <= 0):
                raise np.linalg.LinAlgError("degenerate scaling")
            V = np.swapaxes(Vt, 1, 2)
            rs = 1.0 / np.sqrt(lam)
            R = Lx @ V * rs[:, None, :]
            Lx_inv = np.linalg.inv(Lx)
            Rinv = (np.sqrt(lam)[:, :, None] * Vt) @ Lx_inv
            W["s"][n] = (R, Rinv, lam, R @ np.swapaxes(R, 1, 2))
        return W

    def lam(self, W):
        out = np.zeros(self.N)
        if self.l:
            out[: self.l] = W["l"][1]
        for n, (_, _, lam, _) in W["s"].items():
            M = np.zeros((lam.shape[0], n, n))
            M[:, np.arange(n), np.arange(n)] = lam
            self.put(out, n, M)
        return out

    def apply(self, W, v, kind):
        """kind: 'W' (z-side scaling), 'WinvT' (x-side), 'WT' (back to x space), 'D' (W'W)."""
        out = np.empty_like(v)
        if self.l:
            d = W["l"][0]
            vl = v[: self.l]
            out[: self.l] = {"W": d * vl, "WinvT": vl / d, "WT": d * vl, "D": d * d * vl}[kind]
        for n, (R, Rinv, _, G) in W["s"].items():
            V = self.mats(v, n)
            Rt = np.swapaxes(R, 1, 2)
            if kind == "W":
                M = Rt @ V @ R
            elif kind == "WinvT":
                M = Rinv @ V @ np.swapaxes(Rinv, 1, 2)
            elif kind == "WT":
                M = R @ V @ Rt
            else:
                M = G @ V @ G
            self.put(out, n, _sym(M))
        return out

    def lam_div(self, W, r):
        """Solve lam o u = r for u (lam diagonal in the scaled space)."""
        out = np.empty_like(r)
        if self.l:
            out[: self.l] = r[: self.l] / W["l"][1]
        for n, (_, _, lam, _) in W["s"].items():
            Rm = self.mats(r, n)
            self.put(out, n, Rm * 2.0 / (lam[:, :, None] + lam[:, None, :]))
        return out

    def jordan(self, u, v):
        out = np.empty_like(u)
        out[: self.l] = u[: self.l] * v[: self.l]
        for n in self.gidx:
            U, V = self.mats(u, n), self.mats(v, n)
            self.put(out, n, 0.5 * (U @ V + V @ U))
        return out

    def max_step_scaled(self, W, dv):
        """Largest alpha with lam + alpha*dv in the cone (dv in scaled space)."""
        alpha = np.inf
        if self.l:
            lam = W["l"][1]
            r = dv[: self.l] / lam
            if np.any(r < 0):
                alpha = min(alpha, -1.0 / r.min())
        for n, (_, _, lam, _) in W["s"].items():
            D = self.mats(dv, n)
            isq = 1.0 / np.sqrt(lam)
            S = isq[:, :, None] * D * isq[:, None, :]
            mn = np.linalg.eigvalsh(_sym(S))[:, 0].min()
            if mn < 0:
                alpha = min(alpha, -1.0 / mn)
        return alpha


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _pair_project(v, o, n):
    """Average block ``S`` with ``J S J^T`` in place."""
    S = v[o:o + n * n].reshape(n, n)
    h = n // 2
    d = 0.5 * (S[:h, :h] + S[h:, h:])
    k = 0.5 * (S[:h, h:] - S[h:, :h])
    S[:h, :h] = d
    S[h:, h:] = d
    S[:h, h:] = k
    S[h:, :h] = -k


class _Normal:
    """Builds and factorises M = A D A' for the current scaling."""

    def __init__(self, A: sp.csr_matrix, cone: _Cone):
        self.A = A
        self.cone = cone
        m = A.shape[0]
        Acsc = A.tocsc()
        self.A_l = Acsc[:, : cone.l].tocsr() if cone.l else None
        self.big = []
        self.small = {}
        for n, members in cone.groups.items():
            if n <= _SMALL_BLOCK:
                cols = np.concatenate([np.arange(p, p + n * n) for _, p in members])
                self.small[n] = Acsc[:, cols].tocsr()
                continue
            for _, p in members:
                sub = Acsc[:, p:p + n * n].tocoo()
                rows = np.unique(sub.row)
                pos = np.searchsorted(rows, sub.row)
                q, r = np.divmod(sub.col, n)
                stacked = sp.csr_matrix((sub.data, (pos * n + q, r)), shape=(len(rows) * n, n))
                self.big.append((n, p, rows, stacked))
        self.m = m

    def matrix(self, W):
        m = self.m
        parts = []
        if self.A_l is not None:
            d2 = W["l"][0] ** 2
            parts.append((self.A_l.multiply(d2[None, :]) @ self.A_l.T).tocoo())
        for n, A_s in self.small.items():
            G = W["s"][n][3]
            k = G.shape[0]
            K = np.einsum("kpr,kqs->kpqrs", G, G).reshape(k, n * n, n * n)
            Kb = sp.bsr_matrix((K, np.arange(k), np.arange(k + 1)), shape=(k * n * n, k * n * n))
            parts.append((A_s @ Kb.tocsr() @ A_s.T).tocoo())
        rows_all, cols_all, vals_all = [], [], []
        big_by_n = {}
        for item in self.big:
            big_by_n.setdefault(item[0], []).append(item)
        for n, items in big_by_n.items():
            G_all = W["s"][n][3]
            # block order within the size group follows cone.groups
            order = {p: i for i, (_, p) in enumerate(self.cone.groups[n])}
            for _, p, rows, stacked in items:
                G = G_all[order[p]]
                F = np.asarray(stacked @ G).reshape(len(rows), n, n)
                Mb = F.reshape(len(rows), n * n) @ np.swapaxes(F, 1, 2).reshape(len(rows), n * n).T
                rr, cc = np.meshgrid(rows, rows, indexing="ij")
                rows_all.append(rr.ravel())
                cols_all.append(cc.ravel())
                vals_all.append(Mb.ravel())
        if rows_all:
            parts.append(sp.coo_matrix(
                (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))), shape=(m, m)))
        M = sp.csc_matrix((m, m))
        for P in parts:
            M = M + P
        return (M + M.T) * 0.5

    def apply_D_AT(self, W, y):
        return self.cone.apply(W, self.A.T @ y, "D")


class _Factor:
    def __init__(self, M, reg, op=None):
        m = M.shape[0]
        # residuals for refinement come from ``op`` (the unassembled A D A^T)
        # when given; assembly loses digits once the scaling spreads out
        self.op = op
        diag = M.diagonal()
        scale = max(1.0, float(np.abs(diag).max()) if m else 1.0)
        self.M = M
        Mr = (M + sp.identity(m, format="csc") * (reg * scale)).tocsc()
        if m <= 400:
            self._dense = sla.lu_factor(Mr.toarray(), check_finite=True)
            self._lu = None
        else:
            self._dense = None
            self._lu = spla.splu(Mr, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                 options={"SymmetricMode": True})

    def _solve(self, r):
        if self._dense is not None:
            return sla.lu_solve(self._dense, r)
        return self._lu.solve(r)

    def solve(self, r, refinement=2):
        x = self._solve(r)
        for _ in range(refinement):
            res = r - (self.op(x) if self.op is not None else self.M @ x)
            x = x + self._solve(res)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError("non-finite solution of normal equations")
        return x


def _canonical_rows(A, b):
    """Row permutation determined by row contents only."""
    m, N = A.shape
    if m == 0:
        return np.arange(0)
    probe = np.random.default_rng(0x5EED).standard_normal((N, 2))
    A = sp.csr_matrix(A)
    A.sort_indices()
    h = A @ probe
    return np.lexsort((h[:, 1], h[:, 0], np.diff(A.indptr), b))


def solve(program, config: SolverConfig | None = None) -> SolverResult:
    """Solve ``program`` (a :class:`StandardForm` or anything with ``to_standard_form()``)."""
    cfg = config or SolverConfig()
    if not isinstance(program, StandardForm):
        program = program.to_standard_form()
    t0 = time.perf_counter()
    stream = cfg.stream if cfg.stream is not None else sys.stderr
    cone = _Cone(program.l, program.s)
    A0, b0, c0 = program.A, program.b, program.c
    m, N = A0.shape
    # canonical row order: the pivot sequence, hence the iterates, do not
    # depend on the order in which constraints were written
    order = _canonical_rows(A0, b0)
    A0, b0 = A0[order], b0[order]

    # row equilibration and objective scaling; undone on return
    rnorm = np.sqrt(np.asarray(A0.multiply(A0).sum(axis=1)).ravel())
    rnorm[rnorm == 0] = 1.0
    Sr = 1.0 / rnorm
    A = sp.csr_matrix(sp.diags(Sr) @ A0)
    b = b0 * Sr
    cscale = max(1.0, float(np.abs(c0).max()) if N else 1.0)
    c = c0 / cscale
    normal = _Normal(A, cone)
    flags = program.complex_blocks or [False] * len(program.s)
    paired = [(o, n) for o, n, f in zip(program.offsets, program.s, flags) if f]

    e = cone.identity()
    x = e * (1.0 + (np.abs(b).max() if m else 0.0))
    z = e * (1.0 + np.abs(c).max())
    y = np.zeros(m)
    tau, kappa = 1.0, 1.0
    nb, nc = np.linalg.norm(b), np.linalg.norm(c)
    nb0 = np.linalg.norm(b0)
    history = []
    status = ITERATION_LIMIT
    it = 0
    res = {}

    def report(line):
        if cfg.verbose:
            print(line, file=stream)
        log.debug(line)

    report(f"{'it':>3} {'pobj':>14} {'dobj':>14} {'pres':>9} {'dres':>9} {'gap':>9} {'tau':>9} {'step':>6}")
    step = 0.0
    for it in range(cfg.max_iter + 1):
        Ax = A @ x
        ATy = A.T @ y
        rp = b * tau - Ax
        rd = c * tau - ATy - z
        cx, by = c @ x, b @ y
        rg = kappa + cx - by
        mu = (x @ z + tau * kappa) / (cone.nu + 1)

        # primal residual measured on the original (unscaled) rows
        pres = np.linalg.norm(rp * rnorm) / tau / (1.0 + nb0)
        dres = np.linalg.norm(rd) / tau / (1.0 + nc)
        pobj, dobj = cx / tau, by / tau
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        xz = x @ z / tau**2
        res = {"primal": pres, "dual": dres, "gap": gap, "complementarity": xz}
        rec = {"iter": it, "pobj": pobj * cscale, "dobj": dobj * cscale, "pres": pres, "dres": dres,
               "gap": gap, "tau": tau, "kappa": kappa, "step": step,
               "weak_duality_slack": (abs((y / tau) @ (rp / tau)) + abs((rd / tau) @ (x / tau))) * cscale}
        history.append(rec)
        report(f"{it:3d} {pobj * cscale:14.7e} {dobj * cscale:14.7e} {pres:9.2e} {dres:9.2e} {gap:9.2e} "
               f"{tau:9.2e} {step:6.3f}")

        if pres <= cfg.tol and dres <= cfg.tol and gap <= cfg.tol:
            status = OPTIMAL
            break
        # infeasibility certificates
        if by > 0:
            pinf = np.linalg.norm(ATy + z) / by
            if pinf <= cfg.tol:
                status = PRIMAL_INFEASIBLE
                res["certificate"] = pinf
                break
        if cx < 0:
            dinf = np.linalg.norm(Ax) / -cx
            if dinf <= cfg.tol:
                status = DUAL_INFEASIBLE
                res["certificate"] = dinf
                break
        if it == cfg.max_iter:
            break

        try:
            W = cone.nt_scaling(x, z)
            lam = cone.lam(W)
            ADc = A @ cone.apply(W, c, "D")
            fac = _Factor(normal.matrix(W), cfg.regularization,
                          op=lambda v, W=W: A @ normal.apply_D_AT(W, v))
            q = fac.solve(ADc + b, cfg.refinement)

            def newton(eta, rc, r_tk):
                # rc: target for lam o (W^{-T}dx + W dz), r_tk: target for kappa dtau + tau dkappa
                R1, R2, R3 = eta * rp, -eta * rd, eta * rg
                R4x = cone.apply(W, cone.lam_div(W, rc), "WT")
                DR2 = cone.apply(W, R2, "D")
                p = fac.solve(R1 - A @ (R4x + DR2), cfg.refinement)
                DATp = cone.apply(W, A.T @ p, "D")
                DATq = cone.apply(W, A.T @ q, "D")
                denom = b @ q - c @ DATq + c @ cone.apply(W, c, "D") + kappa / tau
                num = R3 - b @ p + c @ (R4x + DR2 + DATp) + r_tk / tau
                dtau = num / denom
                dy = p + q * dtau
                dx = R4x + DR2 + DATp + DATq * dtau - cone.apply(W, c, "D") * dtau
                dz = c * dtau - A.T @ dy - R2
                dkappa = (r_tk - kappa * dtau) / tau
                return dx, dy, dz, dtau, dkappa

            def step_to_boundary(dx, dz, dtau, dkappa):
                a = min(cone.max_step_scaled(W, cone.apply(W, dx, "WinvT")),
                        cone.max_step_scaled(W, cone.apply(W, dz, "W")))
                if dtau < 0:
                    a = min(a, -tau / dtau)
                if dkappa < 0:
                    a = min(a, -kappa / dkappa)
                return a

            # predictor
            lamlam = cone.jordan(lam, lam)
            dxa, dya, dza, dta, dka = newton(1.0, -lamlam, -tau * kappa)
            aa = min(1.0, step_to_boundary(dxa, dza, dta, dka))
            sigma = (1.0 - aa) ** 3
            # corrector
            corr = cone.jordan(cone.apply(W, dxa, "WinvT"), cone.apply(W, dza, "W"))
            rc = -lamlam - corr + sigma * mu * e
            r_tk = -tau * kappa - dta * dka + sigma * mu
            dx, dy, dz, dt, dk = newton(1.0 - sigma, rc, r_tk)
            amax = step_to_boundary(dx, dz, dt, dk)
            step = min(1.0, 0.99 * amax)
        except (np.linalg.LinAlgError, RuntimeError, ValueError, ZeroDivisionError) as exc:
            log.debug("KKT breakdown: %s", exc)
            status = NUMERICAL_FAILURE
            break
        if not np.isfinite(step) or step < cfg.min_step:
            status = NUMERICAL_FAILURE
            break
        x = x + step * dx
        y = y + step * dy
        z = z + step * dz
        tau = tau + step * dt
        kappa = kappa + step * dk
        # keep the PSD parts exactly symmetric
        for n in cone.gidx:
            cone.put(x, n, _sym(cone.mats(x, n)))
            cone.put(z, n, _sym(cone.mats(z, n)))
        for o, n in paired:
            _pair_project(x, o, n)
            _pair_project(z, o, n)

    if status in (OPTIMAL, ITERATION_LIMIT, NUMERICAL_FAILURE):
        xs, ys, zs = x / tau, y / tau, z / tau
    else:
        xs, ys, zs = x, y, z
    y_out = np.empty(m)
    y_out[order] = ys * Sr * cscale
    z_out = zs * cscale
    pobj = float(c0 @ xs)
    dobj = float(program.b @ y_out)
    if status in (PRIMAL_INFEASIBLE, DUAL_INFEASIBLE):
        pobj = float("nan") if status == PRIMAL_INFEASIBLE else -np.inf
        dobj = np.inf if status == PRIMAL_INFEASIBLE else float("nan")
    wall = time.perf_counter() - t0
    report(f"status: {status} after {it} iterations ({wall:.2f}s)")
    return SolverResult(status, xs, y_out, z_out, pobj, dobj, it, res, program.l, list(program.s), history, wall)
