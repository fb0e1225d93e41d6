"""
KKT system assembly and the factorize/solve layer
=================================================

At a dispatch optimum ``z*`` the KKT map ``F(z, d)`` vanishes. Its partial
Jacobians ``d1F = dF/dz`` and ``d2F = dF/dd`` give the demand sensitivity of
the whole primal-dual solution through ``d1F dz = -d2F dd``.

Row ``i`` of ``F`` belongs to entry ``i`` of ``z``, so ``d1F`` is square with
matching row and column blocks; :attr:`KktSystem.index_map` names them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from gridsens.dispatch import DEFAULT_TOL, DispatchSolution, pack_solution
from gridsens.errors import DegeneracyError
from gridsens.model import DispatchCase
from gridsens.parallel import OpCounter
from gridsens.problem import DispatchProblem, IndexBlock, Layout

log = logging.getLogger(__name__)

__all__ = [
    "KktSystem",
    "assemble_kkt",
    "artifact_dim",
    "published_dim",
    "Factorization",
    "factorize",
    "dump_coo",
]

SOLVE_RTOL = 1e-9
# residuals between SOLVE_RTOL and this bound are accepted with a warning
SOLVE_HARD_RTOL = 1e-6


def artifact_dim(n_nodes: int, n_lines: int, n_batteries: int, horizon: int) -> int:
    """KKT dimension ``T(5N + 4M + 7K + 1) + 5K`` from block enumeration."""
    N, M, K, T = n_nodes, n_lines, n_batteries, horizon
    return T * (5 * N + 4 * M + 7 * K + 1) + 5 * K


def published_dim(n_nodes: int, n_lines: int, n_batteries: int, horizon: int) -> int:
    """The published count ``T(4N + 4M + 7K + 1) + 3K``, kept for reference only."""
    N, M, K, T = n_nodes, n_lines, n_batteries, horizon
    return T * (4 * N + 4 * M + 7 * K + 1) + 3 * K


@dataclass(frozen=True, eq=False)
class KktSystem:
    """Jacobians of the KKT map at one primal-dual solution.

    Attributes
    ----------
    d1F : scipy.sparse.csc_matrix
        ``(L, L)`` Jacobian in ``z``.
    d2F : scipy.sparse.csc_matrix
        ``(L, N*T)`` Jacobian in the demand, ``-1`` on each balance row.
        Column ``t * N + n`` belongs to demand entry ``(n, t)``.
    index_map : dict[str, IndexBlock]
        Named blocks of ``z`` (and of the rows of ``F``).
    dim_l : int
        ``L``.
    """

    d1F: sp.csc_matrix
    d2F: sp.csc_matrix
    index_map: dict
    dim_l: int
    z: np.ndarray
    problem: DispatchProblem

    @property
    def layout(self) -> Layout:
        return self.problem.layout

    def g_rows(self) -> np.ndarray:
        """Positions of the generation block inside ``z``, period-major."""
        blk: IndexBlock = self.index_map["g"]
        return np.arange(blk.start, blk.stop)

    def residual(self, demand=None) -> float:
        return float(np.abs(self.problem.kkt_map(self.z, demand)).max(initial=0.0))


def assemble_kkt(case: DispatchCase, solution: DispatchSolution, reg_eps: float | None = None,
                 tol: float = DEFAULT_TOL) -> KktSystem:
    """Build ``d1F`` and ``d2F`` at ``solution``.

    Raises
    ------
    ValueError
        The solution does not match the case dimensions, or ``F`` at the
        solution exceeds ``tol``.
    """
    if reg_eps is None:
        reg_eps = solution.reg_eps
    problem = DispatchProblem(case, reg_eps)
    lay = problem.layout
    if solution.g.shape != (lay.N, lay.T) or solution.s.shape != (lay.K, lay.T + 1):
        raise ValueError(
            f"solution shape g{solution.g.shape}/s{solution.s.shape} does not match "
            f"case (N={lay.N}, K={lay.K}, T={lay.T})"
        )
    z = pack_solution(lay, solution)
    res = float(np.abs(problem.kkt_map(z)).max(initial=0.0))
    if res > tol:
        raise ValueError(f"KKT residual {res:.3e} at the solution exceeds tol {tol:.1e}")
    d1F = problem.kkt_jacobian(z)
    d2F = problem.demand_jacobian()
    if d1F.shape[0] != artifact_dim(lay.N, lay.M, lay.K, lay.T):
        raise ValueError("assembled KKT dimension disagrees with the layout formula")
    return KktSystem(d1F, d2F, lay.index_map(), lay.dim, z, problem)


class Factorization:
    """Sparse LU of a square matrix, reusable for ``A x = b`` and ``A^T x = b``.

    Every solve checks its residual column by column and refines the columns
    that miss ``1e-9 * (1 + ||b||_inf)``. The handle is read-only after
    construction, so several threads may solve with it at once.
    """

    def __init__(self, matrix, counter: OpCounter | None = None, period: int | None = None):
        A = sp.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        self.n = A.shape[0]
        self.period = period
        self.counter = counter
        if self.n == 0:
            self.lu = None
        else:
            try:
                self.lu = spla.splu(A, permc_spec="COLAMD")
            except RuntimeError as exc:
                raise DegeneracyError(f"singular matrix: {exc}", period=period) from exc
            # SuperLU happily factorizes matrices that are singular to working
            # precision; a tiny pivot relative to the largest one exposes them
            diag = np.abs(self.lu.U.diagonal())
            if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13 * max(diag.max(), 1.0):
                raise DegeneracyError("numerically singular matrix", period=period)
        if counter is not None:
            counter.add(factorizations=1)

    def solve(self, rhs, transpose: bool = False) -> np.ndarray:
        """Solve ``A x = rhs`` (or ``A^T x = rhs``) for one or more columns."""
        b = np.asarray(rhs.toarray() if sp.issparse(rhs) else rhs, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {self.n}")
        vec = b.ndim == 1
        B = b[:, None] if vec else b
        ncol = B.shape[1]
        if self.counter is not None:
            key = "adjoint_solves" if transpose else "forward_solves"
            self.counter.add(**{key: ncol, "max_rhs_columns": ncol})
        if self.n == 0 or ncol == 0:
            X = np.zeros_like(B)
            return X[:, 0] if vec else X
        trans = "T" if transpose else "N"
        M = self.A.T if transpose else self.A
        X = self.lu.solve(np.ascontiguousarray(B), trans=trans)
        scale = SOLVE_RTOL * (1.0 + np.abs(B).max(axis=0))
        for _ in range(3):
            R = B - M @ X
            err = np.abs(R).max(axis=0)
            bad = np.flatnonzero(err > scale)
            if bad.size == 0:
                break
            X[:, bad] += self.lu.solve(np.ascontiguousarray(R[:, bad]), trans=trans)
        else:
            err = np.abs(B - M @ X).max(axis=0)
            worst = float((err / (1.0 + np.abs(B).max(axis=0))).max())
            if worst > SOLVE_HARD_RTOL or not np.isfinite(worst):
                raise DegeneracyError(
                    f"linear solve residual {worst:.2e} after refinement", period=self.period
                )
            if worst > SOLVE_RTOL:
                log.warning("linear solve residual %.2e above %.0e", worst, SOLVE_RTOL)
        return X[:, 0] if vec else X


def factorize(matrix, counter: OpCounter | None = None, period: int | None = None) -> Factorization:
    """Factorize ``matrix``; raises :class:`DegeneracyError` if it is singular."""
    return Factorization(matrix, counter=counter, period=period)


def dump_coo(matrix, path) -> None:
    """Write ``matrix`` as ``row col value`` lines (0-based), preceded by its shape."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {float(v)!r}\n")
