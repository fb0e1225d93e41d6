"""
Decentralized implicit differentiation
======================================

Splitting each state-of-charge link ``s[:, t+1] = s_next[:, t]`` with a
coupling dual ``nu[:, t]`` breaks the dispatch into ``T`` period problems
that only see ``nu``. For fixed ``nu`` the period-``t`` solution ``z_t`` is a
function of ``(d_t, nu)``; the coupling conditions
``h(z) = sum_t Dh_t z_t = 0`` then fix ``nu(d)``. Differentiating gives the
block-tridiagonal system

    C Dnu = -sum_t Dh_t X_t S_t,   C = sum_t Dh_t Y_t,

with ``X_t = -J_t^{-1} dF_d_t`` and ``Y_t = -J_t^{-1} dF_nu_t``, and

    Dg_t = P_g (X_t S_t + Y_t Dnu).

Reverse mode never forms ``Dnu``: it pushes the emission cotangent through
the period blocks, solves ``C^T y = w`` once, and pulls ``y`` back.

Period blocks
-------------
Block ``t`` owns every entry of ``z`` tied to period ``t``: primal ``g, theta,
f, p, s`` of period ``t``, the balance, Kirchhoff, reference and state rows
of period ``t`` with their duals, and the bound multipliers of those
primals. Block 0 also owns the ``init`` row. The last block owns the final
state ``s[:, T]`` (it plays the role of ``s_next`` there) and its bound
multipliers. Every other block gets ``K`` extra ``s_next`` variables with the
stationarity rows ``-dual_soc + nu = 0``. The ``final`` row and its dual are
the last coupling pair, so ``nu`` has ``T`` blocks of ``K`` entries (index
``t * K + k``) for any ``T >= 1``.

Local Jacobians are sliced out of the global ``d1F`` rather than rebuilt, so
both differentiation paths see exactly the same numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg.lapack as lapack
import scipy.sparse as sp

from gridsens.dispatch import DEFAULT_TOL, DispatchSolution
from gridsens.errors import DegeneracyError
from gridsens.kkt import KktSystem, assemble_kkt, factorize
from gridsens.model import DispatchCase
from gridsens.oracle import LmeResult, Method, solution_degenerate
from gridsens.parallel import OpCounter, parallel_map
from gridsens.problem import DispatchProblem
from gridsens.qp import solve_qp

__all__ = [
    "CouplingDuals",
    "LocalBlock",
    "CouplingSystem",
    "extract_coupling_duals",
    "solve_local",
    "build_local_blocks",
    "assemble_coupling",
    "lme_forward_decentral",
    "lme_reverse_decentral",
    "nu_jacobian",
]


@dataclass(frozen=True)
class CouplingDuals:
    """``nu[k, t]``: dual of ``s_next[k, t] - s[k, t+1] = 0`` (``s_final`` for the last ``t``)."""

    nu: np.ndarray

    def __post_init__(self):
        if self.nu.ndim != 2 or not np.all(np.isfinite(self.nu)):
            raise ValueError("nu must be a finite (K, T) array")

    @property
    def flat(self) -> np.ndarray:
        """``nu`` in coupling order ``t * K + k``."""
        return self.nu.T.ravel()


def extract_coupling_duals(solution: DispatchSolution) -> CouplingDuals:
    """Read ``nu`` off a centralized solution.

    With the state row written as ``s_t - p_t - s_{t+1} = 0`` its dual equals
    the dual of the split link, so ``nu[:, t] = dual_soc[:, t]`` for
    ``t < T - 1`` and ``nu[:, T-1] = dual_final``.
    """
    K, T = solution.dual_soc.shape
    nu = np.empty((K, T))
    nu[:, : T - 1] = solution.dual_soc[:, : T - 1]
    nu[:, T - 1] = solution.dual_final
    return CouplingDuals(nu)


def solve_local(case: DispatchCase, t: int, nu: CouplingDuals, reg_eps: float | None = None,
                tol: float = DEFAULT_TOL) -> dict:
    """Solve the period-``t`` problem for fixed coupling duals.

    Minimises the period's share of the regularised cost plus the coupling
    terms ``-nu[:, t-1] . s_t + nu[:, t] . s_next_t`` over that period's
    network, storage power and state bounds. ``s_next_t = s_t - p_t`` is
    substituted for ``t < T - 1``; in the last period ``s_next`` is the
    final state with its own bounds and regularisation.

    Returns a dict with ``g, theta, f, p, s, s_next`` (1-D arrays, ``t``-th
    period) for comparison with the centralized optimum.
    """
    from gridsens.dispatch import DEFAULT_REG_EPS

    if reg_eps is None:
        reg_eps = DEFAULT_REG_EPS
    T = case.horizon
    if not 0 <= t < T:
        raise ValueError(f"period {t} outside 0..{T - 1}")
    prob = DispatchProblem(case, reg_eps)
    lay = prob.layout
    P, E = lay.primal, lay.equality
    last = t == T - 1
    cols = [P["g"].at(t), P["theta"].at(t), P["f"].at(t), P["p"].at(t), P["s"].at(t)]
    if last:
        cols.append(P["s"].at(T))
    cols = np.concatenate(cols)
    rows = [E["balance"].at(t), E["kirchhoff"].at(t), E["ref"].at(t)]
    if t == 0:
        rows.append(E["init"].at(0))
    if last:
        rows.append(E["soc"].at(t))
    rows = np.concatenate(rows)

    q = prob.q.copy()
    v = nu.nu
    if t > 0:
        q[P["s"].at(t)] -= v[:, t - 1]
    if last:
        q[P["s"].at(T)] += v[:, t]
    else:
        q[P["s"].at(t)] += v[:, t]
        q[P["p"].at(t)] -= v[:, t]
    lo, up = prob.bounds
    A = prob.a_eq[rows][:, cols]
    res = solve_qp(q[cols], prob.hess[cols], A, prob.b_eq()[rows], lo[cols], up[cols], tol=tol)
    x = np.zeros(lay.n_primal)
    x[cols] = res.x
    out = {name: x[P[name].at(t)] for name in ("g", "theta", "f", "p", "s")}
    out["s_next"] = x[P["s"].at(T)] if last else out["s"] - out["p"]
    return out


@dataclass(eq=False)
class LocalBlock:
    """Period-``t`` slice of the KKT system with ``nu`` on the parameter side.

    Attributes
    ----------
    t : int
    index : ndarray
        Global ``z`` positions of the block entries; ``-1`` marks the added
        ``s_next`` slots.
    d1F_t : csc_matrix, (L_t, L_t)
    dF_d_t : csc_matrix, (L_t, N)
    dF_nu_t : csc_matrix, (L_t, T*K)
        Nonzero only in the ``nu[:, t-1]`` and ``nu[:, t]`` columns.
    Dh_t : csr_matrix, (T*K, L_t)
        ``-I`` at ``s_t`` in coupling block ``t-1``, ``+I`` at ``s_next_t`` in
        block ``t``.
    nu_cols : ndarray
        The nonzero columns of ``dF_nu_t``.
    g_local : ndarray
        Positions of ``g_t`` inside the block.
    residual : float
        ``||F_t||_inf`` at the restricted solution.
    h_rows, h_cols, h_vals : ndarray
        Coordinates of the ``+-1`` entries of ``Dh_t``, for gather/scatter
        products without sparse-matrix overhead.
    nu_rhs : ndarray, (L_t, len(nu_cols))
        Dense ``-dF_nu_t[:, nu_cols]``.
    """

    t: int
    index: np.ndarray
    d1F_t: sp.csc_matrix
    dF_d_t: sp.csc_matrix
    dF_nu_t: sp.csc_matrix
    Dh_t: sp.csr_matrix
    nu_cols: np.ndarray
    g_local: np.ndarray
    residual: float
    h_rows: np.ndarray
    h_cols: np.ndarray
    h_vals: np.ndarray
    nu_rhs: np.ndarray

    @property
    def dim(self) -> int:
        return self.d1F_t.shape[0]


def _block_index(imap, t, T):
    last = t == T - 1

    def fam(name, when=True, period=None):
        if not when:
            return []
        return [imap[name].at(t if period is None else period)]

    parts = (
        fam("g") + fam("theta") + fam("f") + fam("p") + fam("s") + fam("s", last, T)
        + fam("dual_balance") + fam("dual_kirchhoff") + fam("dual_ref") + fam("dual_soc")
        + fam("dual_init", t == 0, 0)
    )
    for side in ("lower", "upper"):
        for name in ("g", "f", "p", "s"):
            parts += fam(f"mult_{side}_{name}")
        parts += fam(f"mult_{side}_s", last, T)
    return np.concatenate(parts).astype(np.int64)


def _make_block(kkt: KktSystem, d1F: sp.csr_matrix, d2F: sp.csr_matrix, F: np.ndarray,
                t: int) -> LocalBlock:
    lay = kkt.layout
    imap = kkt.index_map
    N, K, T = lay.N, lay.K, lay.T
    last = t == T - 1
    idx = _block_index(imap, t, T)
    n0 = idx.size
    pos = {g: i for i, g in enumerate(idx)}

    d1F = d1F[idx]
    J = d1F[:, idx]
    dF_d = d2F[idx][:, t * N:(t + 1) * N]

    s_t = np.array([pos[i] for i in imap["s"].at(t)], dtype=np.int64)
    soc_t = np.array([pos[i] for i in imap["dual_soc"].at(t)], dtype=np.int64)
    nu_rows, nu_cols_, nu_vals = [], [], []
    if t > 0:
        # -nu[:, t-1] enters the stationarity of s_t exactly where the global
        # Jacobian has the column of dual_soc[:, t-1]
        col = d1F[:, imap["dual_soc"].at(t - 1)].tocoo()
        nu_rows.append(col.row)
        nu_cols_.append(col.col + (t - 1) * K)
        nu_vals.append(col.data)

    if last:
        s_next = np.array([pos[i] for i in imap["s"].at(T)], dtype=np.int64)
        col = d1F[:, imap["dual_final"].at(0)].tocoo()
        nu_rows.append(col.row)
        nu_cols_.append(col.col + t * K)
        nu_vals.append(col.data)
        index = idx
    else:
        # append s_next: column -1 in the state rows, row -dual_soc (+nu)
        s_next = n0 + np.arange(K)
        ones = np.ones(K)
        extra_col = sp.csr_matrix((-ones, (soc_t, np.arange(K))), shape=(n0, K))
        extra_row = sp.csr_matrix((-ones, (np.arange(K), soc_t)), shape=(K, n0))
        J = sp.bmat([[J, extra_col], [extra_row, None]], format="csr")
        dF_d = sp.vstack([dF_d, sp.csr_matrix((K, N))], format="csr")
        nu_rows.append(s_next)
        nu_cols_.append(t * K + np.arange(K))
        nu_vals.append(ones)
        index = np.concatenate([idx, -np.ones(K, dtype=np.int64)])

    L_t = J.shape[0]
    if K:
        dF_nu = sp.csc_matrix(
            (np.concatenate(nu_vals), (np.concatenate(nu_rows), np.concatenate(nu_cols_))),
            shape=(L_t, T * K),
        )
    else:
        dF_nu = sp.csc_matrix((L_t, 0))

    h_rows = [t * K + np.arange(K)]
    h_cols = [s_next]
    h_vals = [np.ones(K)]
    if t > 0:
        h_rows.append((t - 1) * K + np.arange(K))
        h_cols.append(s_t)
        h_vals.append(-np.ones(K))
    h_rows, h_cols, h_vals = (np.concatenate(a) for a in (h_rows, h_cols, h_vals))
    Dh = sp.csr_matrix((h_vals, (h_rows, h_cols)), shape=(T * K, L_t))
    nu_cols = np.unique(dF_nu.tocoo().col)

    local_F = np.concatenate([F[idx], np.zeros(L_t - n0)])
    return LocalBlock(
        t=t,
        index=index,
        d1F_t=J.tocsc(),
        dF_d_t=dF_d.tocsc(),
        dF_nu_t=dF_nu,
        Dh_t=Dh,
        nu_cols=nu_cols,
        g_local=np.arange(N),
        residual=float(np.abs(local_F).max(initial=0.0)),
        h_rows=h_rows,
        h_cols=h_cols,
        h_vals=h_vals,
        nu_rhs=-dF_nu[:, nu_cols].toarray(),
    )


def build_local_blocks(case: DispatchCase, solution: DispatchSolution,
                       nu: CouplingDuals | None = None, parallelism: int = 1,
                       kkt: KktSystem | None = None, tol: float = DEFAULT_TOL) -> list[LocalBlock]:
    """Slice the global KKT system into ``T`` period blocks.

    ``nu`` defaults to :func:`extract_coupling_duals`; it must agree with the
    solution's state duals, since the blocks are linearised there.

    Raises
    ------
    ValueError
        A block's KKT residual exceeds ``tol`` or ``nu`` is inconsistent.
    """
    if kkt is None:
        kkt = assemble_kkt(case, solution, tol=tol)
    expected = extract_coupling_duals(solution)
    if nu is None:
        nu = expected
    elif nu.nu.shape != expected.nu.shape or not np.allclose(nu.nu, expected.nu, rtol=0, atol=tol):
        raise ValueError("coupling duals do not match the solution")
    F = kkt.problem.kkt_map(kkt.z)
    d1F, d2F = kkt.d1F.tocsr(), kkt.d2F.tocsr()
    blocks = parallel_map(lambda t: _make_block(kkt, d1F, d2F, F, t), range(case.horizon), parallelism)
    for blk in blocks:
        if blk.residual > tol:
            raise ValueError(f"local KKT residual {blk.residual:.2e} exceeds tol in period {blk.t}")
    return blocks


class CouplingSystem:
    """Banded ``(T*K, T*K)`` coupling matrix ``C = sum_t Dh_t Y_t``.

    Blocks ``(t, t')`` with ``|t - t'| > 1`` vanish, so ``C`` has lower and
    upper bandwidth ``2K - 1`` and is stored in LAPACK band format; solves
    use ``gbtrf``/``gbtrs`` for ``O(T K^3)`` work.
    """

    def __init__(self, n_batteries: int, horizon: int):
        self.K, self.T = n_batteries, horizon
        self.size = n_batteries * horizon
        self.kl = self.ku = max(2 * n_batteries - 1, 0)
        self.ab = np.zeros((2 * self.kl + self.ku + 1, self.size))
        self._lu = None

    def add(self, rows: np.ndarray, cols: np.ndarray, values: np.ndarray) -> None:
        """Accumulate a dense ``(len(rows), len(cols))`` block of values."""
        r = rows[:, None]
        c = cols[None, :]
        if np.any(np.abs(r - c) > self.kl) and np.any(values[np.abs(r - c) > self.kl] != 0):
            raise ValueError("entry outside the coupling bandwidth")
        inside = np.abs(r - c) <= self.kl
        rr, cc = np.broadcast_arrays(r, c)
        np.add.at(self.ab, (self.kl + self.ku + rr[inside] - cc[inside], cc[inside]), values[inside])
        self._lu = None

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.size, self.size))
        for j in range(self.size):
            lo, hi = max(0, j - self.ku), min(self.size, j + self.kl + 1)
            for i in range(lo, hi):
                out[i, j] = self.ab[self.kl + self.ku + i - j, j]
        return out

    def block(self, t: int, u: int) -> np.ndarray:
        K = self.K
        return self.to_dense()[t * K:(t + 1) * K, u * K:(u + 1) * K]

    def _factor(self):
        if self._lu is None:
            lu, piv, info = lapack.dgbtrf(self.ab, self.kl, self.ku)
            if info > 0:
                raise DegeneracyError("coupling matrix C is singular")
            self._lu = (lu, piv)
        return self._lu

    def solve(self, rhs, transpose: bool = False, counter: OpCounter | None = None) -> np.ndarray:
        b = np.asarray(rhs, dtype=float)
        if self.size == 0:
            return np.zeros_like(b)
        lu, piv = self._factor()
        x, info = lapack.dgbtrs(lu, self.kl, self.ku, b, piv, trans=1 if transpose else 0)
        if info != 0:
            raise DegeneracyError(f"banded solve failed (info={info})")
        if counter is not None:
            counter.add(coupling_solves=1)
        return x

    @staticmethod
    def forward_rhs(blocks, products) -> np.ndarray:
        """``-sum_t Dh_t X_t S_t`` for per-period ``X_t`` of shape ``(L_t, N)``."""
        if not blocks:
            return np.zeros((0, 0))
        size = blocks[0].Dh_t.shape[0]
        N = products[0].shape[1]
        out = np.zeros((size, N * len(blocks)))
        for blk, X in zip(blocks, products):
            out[:, blk.t * N:(blk.t + 1) * N] -= blk.Dh_t @ X
        return out


def _coupling_columns(blk: LocalBlock, fac) -> np.ndarray:
    """``Y_t = -J_t^{-1} dF_nu_t`` restricted to the nonzero ``nu`` columns."""
    if blk.nu_cols.size == 0:
        return np.zeros((blk.dim, 0))
    return fac.solve(blk.nu_rhs)


def assemble_coupling(blocks: list[LocalBlock], parallelism: int = 1, factors=None,
                      counter: OpCounter | None = None):
    """Build ``C`` from the local sensitivities to ``nu``.

    ``factors`` reuses existing local factorizations (one per block). The
    per-period solves run in parallel; accumulation is serial in ascending
    ``t``. Returns ``(C, Y)`` with ``Y[t]`` the local ``nu`` sensitivities.
    """
    if not blocks:
        return CouplingSystem(0, 0), []
    K = blocks[0].Dh_t.shape[0] // len(blocks)
    T = len(blocks)
    if factors is None:
        factors = parallel_map(lambda b: factorize(b.d1F_t, counter, period=b.t), blocks, parallelism)
    Y = parallel_map(lambda bf: _coupling_columns(*bf), list(zip(blocks, factors)), parallelism)
    C = CouplingSystem(K, T)
    for blk, Yt in zip(blocks, Y):
        if Yt.shape[1] == 0:
            continue
        # Dh_t @ Y_t, restricted to the rows Dh_t touches
        C.add(blk.h_rows, blk.nu_cols, blk.h_vals[:, None] * Yt[blk.h_cols])
    return C, Y


def _setup(case, solution, parallelism, kkt):
    t0 = time.perf_counter()
    if kkt is None:
        kkt = assemble_kkt(case, solution)
    blocks = build_local_blocks(case, solution, parallelism=parallelism, kkt=kkt)
    return blocks, time.perf_counter() - t0


def _forward_pieces(blocks, N, K, T, parallelism, counter, timings):
    def local(blk):
        fac = factorize(blk.d1F_t, counter, period=blk.t)
        rhs = -sp.hstack([blk.dF_d_t, blk.dF_nu_t[:, blk.nu_cols]]).toarray()
        sol = fac.solve(rhs)
        return sol[:, :N], sol[:, N:]

    t0 = time.perf_counter()
    out = parallel_map(local, blocks, parallelism)
    timings["solve:local"] = time.perf_counter() - t0
    X = [o[0] for o in out]
    Y = [o[1] for o in out]

    t0 = time.perf_counter()
    C = CouplingSystem(K, T)
    for blk, Yt in zip(blocks, Y):
        if Yt.shape[1]:
            rows = np.flatnonzero(blk.Dh_t.getnnz(axis=1))
            C.add(rows, blk.nu_cols, (blk.Dh_t @ Yt)[rows])
    R = CouplingSystem.forward_rhs(blocks, X)
    timings["coupling_assemble"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    Dnu = C.solve(R, counter=counter) if C.size else np.zeros((0, N * T))
    timings["solve:coupling"] = time.perf_counter() - t0
    return X, Y, C, Dnu


def nu_jacobian(case: DispatchCase, solution: DispatchSolution, parallelism: int = 1,
                kkt: KktSystem | None = None) -> np.ndarray:
    """``Dnu = d nu / d d`` of shape ``(T*K, N*T)``: rows ``t*K + k``, columns ``t*N + n``."""
    blocks, _ = _setup(case, solution, parallelism, kkt)
    N, T = case.demand.shape
    K = case.network.n_batteries
    return _forward_pieces(blocks, N, K, T, parallelism, OpCounter(), {})[3]


def lme_forward_decentral(case: DispatchCase, solution: DispatchSolution, parallelism: int = 1,
                          kkt: KktSystem | None = None) -> LmeResult:
    """LMEs from the per-period Jacobians and the coupling system.

    Materialises ``Dnu`` (``T*K`` by ``N*T``) and every ``Dg_t``.
    """
    blocks, t_asm = _setup(case, solution, parallelism, kkt)
    counter = OpCounter()
    N, T = case.demand.shape
    K = case.network.n_batteries
    timings = {"assemble": t_asm}
    X, Y, C, Dnu = _forward_pieces(blocks, N, K, T, parallelism, counter, timings)

    t0 = time.perf_counter()
    lam = np.zeros(N * T)
    e = case.emissions_rate
    for blk, Xt, Yt in zip(blocks, X, Y):
        t = blk.t
        Dg = np.zeros((N, N * T))
        Dg[:, t * N:(t + 1) * N] = Xt[blk.g_local]
        if Yt.shape[1]:
            Dg += Yt[blk.g_local] @ Dnu[blk.nu_cols]
        lam += Dg.T @ e[:, t]
    timings["contract"] = time.perf_counter() - t0

    return LmeResult(
        lam.reshape(T, N).T,
        Method.DECENTRAL_FWD,
        timings=timings,
        degeneracy_flag=solution_degenerate(case, solution),
        counters=counter.as_dict(),
    )


def lme_reverse_decentral(case: DispatchCase, solution: DispatchSolution, parallelism: int = 1,
                          kkt: KktSystem | None = None) -> LmeResult:
    """LMEs by vector-Jacobian products through the period blocks.

    Stage 1 (parallel): factorize each ``J_t``, solve ``J_t^T a_t = P_g^T e_t``,
    and form ``w = -sum_t dF_nu_t^T a_t`` and ``lam_loc_t = -dF_d_t^T a_t``.
    Stage 2 (parallel solves, serial sum): ``C = sum_t Dh_t Y_t``.
    Stage 3: ``C^T y = w``.
    Stage 4 (parallel): ``J_t^T q_t = Dh_t^T y`` and
    ``lam_t = lam_loc_t + dF_d_t^T q_t``.

    Nothing larger than ``L_t`` by ``2K`` is held per period.
    """
    blocks, t_asm = _setup(case, solution, parallelism, kkt)
    counter = OpCounter()
    N, T = case.demand.shape
    K = case.network.n_batteries
    e = case.emissions_rate
    timings = {"assemble": t_asm}

    def stage1(blk):
        fac = factorize(blk.d1F_t, counter, period=blk.t)
        rhs = np.zeros(blk.dim)
        rhs[blk.g_local] = e[:, blk.t]
        a = fac.solve(rhs, transpose=True)
        # dF_nu_t^T a = Dh_t a
        return fac, -blk.h_vals * a[blk.h_cols], -(blk.dF_d_t.T @ a)

    t0 = time.perf_counter()
    out1 = parallel_map(stage1, blocks, parallelism)
    timings["solve:stage1_local_adjoint"] = time.perf_counter() - t0
    factors = [o[0] for o in out1]
    lam_loc = [o[2] for o in out1]
    w = np.zeros(T * K)
    for blk, o in zip(blocks, out1):
        w[blk.h_rows] += o[1]

    if K == 0:
        lam = np.stack(lam_loc, axis=1)
        return LmeResult(lam, Method.DECENTRAL_REV, timings=timings,
                         degeneracy_flag=solution_degenerate(case, solution),
                         counters=counter.as_dict())

    t0 = time.perf_counter()
    C, _ = assemble_coupling(blocks, parallelism, factors=factors, counter=counter)
    timings["solve:stage2_coupling_columns"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    y = C.solve(w, transpose=True, counter=counter)
    timings["solve:stage3_coupling"] = time.perf_counter() - t0

    def stage4(args):
        blk, fac = args
        rhs = np.zeros(blk.dim)
        rhs[blk.h_cols] = blk.h_vals * y[blk.h_rows]
        q = fac.solve(rhs, transpose=True)
        return blk.dF_d_t.T @ q

    t0 = time.perf_counter()
    corr = parallel_map(stage4, list(zip(blocks, factors)), parallelism)
    timings["solve:stage4_local_adjoint"] = time.perf_counter() - t0

    lam = np.stack([lo + c for lo, c in zip(lam_loc, corr)], axis=1)
    return LmeResult(
        lam,
        Method.DECENTRAL_REV,
        timings=timings,
        degeneracy_flag=solution_degenerate(case, solution),
        counters=counter.as_dict(),
    )
