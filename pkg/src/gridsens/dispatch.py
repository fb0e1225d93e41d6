"""Multi-period DC dispatch with storage, solved as a strictly convex QP."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from gridsens.errors import CaseValidationError, InfeasibleError
from gridsens.model import DispatchCase, validate_case
from gridsens.problem import BOUNDED_FAMILIES, DispatchProblem, Layout
from gridsens.qp import solve_qp

__all__ = [
    "DispatchSolution",
    "solve_dispatch",
    "kkt_residual",
    "duality_gap",
    "degenerate_constraints",
    "DEFAULT_REG_EPS",
    "DEFAULT_TOL",
    "DEGENERACY_THRESHOLD",
]

DEFAULT_REG_EPS = 1e-6
DEFAULT_TOL = 1e-8
DEGENERACY_THRESHOLD = 1e-7


@dataclass(frozen=True, eq=False)
class DispatchSolution:
    """Primal and dual optimum of the dispatch QP.

    Matrices are ``(entities, periods)``. Duals follow the sign convention of
    :mod:`gridsens.problem`: the Lagrangian adds ``dual * (lhs - rhs)`` for
    every equality and ``mu_lo * (lo - x) + mu_up * (x - up)`` for bounds.
    With the balance row written as ``g + Bp - d - Af`` the balance dual is
    minus the nodal price, see :attr:`price`.
    """

    g: np.ndarray
    theta: np.ndarray
    f: np.ndarray
    p: np.ndarray
    s: np.ndarray
    dual_balance: np.ndarray
    dual_kirchhoff: np.ndarray
    dual_ref: np.ndarray
    dual_soc: np.ndarray
    dual_init: np.ndarray
    dual_final: np.ndarray
    mult_lower: dict
    mult_upper: dict
    kkt_residual_norm: float
    objective_value: float
    reg_eps: float
    z: np.ndarray = field(repr=False)
    polished: bool = True
    iterations: int = 0

    @property
    def price(self) -> np.ndarray:
        """Locational marginal price ``-dual_balance`` [$/MWh]."""
        return -self.dual_balance


def _unpack(problem: DispatchProblem, z: np.ndarray, residual: float, objective: float,
            polished: bool, iterations: int) -> DispatchSolution:
    lay = problem.layout
    imap = lay.index_map()
    T = lay.T
    parts = {name: imap[name].unpack(z) for name in imap}
    return DispatchSolution(
        g=parts["g"],
        theta=parts["theta"],
        f=parts["f"],
        p=parts["p"],
        s=parts["s"],
        dual_balance=parts["dual_balance"],
        dual_kirchhoff=parts["dual_kirchhoff"],
        dual_ref=parts["dual_ref"].reshape(T),
        dual_soc=parts["dual_soc"],
        dual_init=parts["dual_init"].reshape(-1),
        dual_final=parts["dual_final"].reshape(-1),
        mult_lower={f: parts["mult_lower_" + f] for f in BOUNDED_FAMILIES},
        mult_upper={f: parts["mult_upper_" + f] for f in BOUNDED_FAMILIES},
        kkt_residual_norm=residual,
        objective_value=objective,
        reg_eps=problem.reg_eps,
        z=z,
        polished=polished,
        iterations=iterations,
    )


def _quick_infeasibility(case: DispatchCase) -> None:
    supply = case.g_max.sum(axis=0) + case.network.p_max.sum()
    short = np.flatnonzero(case.demand.sum(axis=0) > supply + 1e-12)
    if short.size:
        raise InfeasibleError(
            f"total demand exceeds total generation plus storage power in period {int(short[0])}"
        )


def solve_dispatch(
    case: DispatchCase, reg_eps: float = DEFAULT_REG_EPS, tol: float = DEFAULT_TOL
) -> DispatchSolution:
    """Solve the regularised dispatch problem.

    Minimises ``sum(c * g) + reg_eps/2 * ||(g, theta, f, p, s)||^2`` over the
    DC network, storage and boundary constraints. On success every KKT
    residual (stationarity, equalities, complementarity) is at most ``tol``.

    Raises
    ------
    InfeasibleError
        Demand cannot be served.
    SolverError
        Numerical failure before reaching ``tol``.
    """
    if reg_eps <= 0:
        raise ValueError("reg_eps must be > 0")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    violations = validate_case(case)
    if violations:
        raise CaseValidationError(violations)
    _quick_infeasibility(case)
    problem = DispatchProblem(case, reg_eps)
    lo, up = problem.bounds
    res = solve_qp(problem.q, problem.hess, problem.a_eq, problem.b_eq(), lo, up, tol=tol)
    return solution_from_qp(problem, res.x, res.y, res.z_lo, res.z_up, res.polished, res.iterations)


def solution_from_qp(problem: DispatchProblem, x, y, z_lo, z_up, polished=True, iterations=0):
    bi = problem.layout.bounded_primal_index
    z = np.concatenate([x, y, z_lo[bi], z_up[bi]])
    residual = float(np.abs(problem.kkt_map(z)).max())
    objective = float(problem.q @ x + 0.5 * problem.reg_eps * x @ x)
    return _unpack(problem, z, residual, objective, polished, iterations)


def kkt_residual(case: DispatchCase, solution: DispatchSolution, reg_eps: float | None = None) -> float:
    """``||F(z, d)||_inf`` of ``solution`` for ``case``."""
    if reg_eps is None:
        reg_eps = solution.reg_eps
    problem = DispatchProblem(case, reg_eps)
    z = pack_solution(problem.layout, solution)
    return float(np.abs(problem.kkt_map(z)).max())


def pack_solution(layout: Layout, solution: DispatchSolution) -> np.ndarray:
    """Rebuild the flat ``z`` vector from the named fields of ``solution``."""
    imap = layout.index_map()
    z = np.zeros(layout.dim)
    fields = {
        "g": solution.g, "theta": solution.theta, "f": solution.f, "p": solution.p,
        "s": solution.s, "dual_balance": solution.dual_balance,
        "dual_kirchhoff": solution.dual_kirchhoff, "dual_ref": solution.dual_ref[None, :],
        "dual_soc": solution.dual_soc, "dual_init": solution.dual_init[:, None],
        "dual_final": solution.dual_final[:, None],
    }
    for fam in BOUNDED_FAMILIES:
        fields["mult_lower_" + fam] = solution.mult_lower[fam]
        fields["mult_upper_" + fam] = solution.mult_upper[fam]
    for name, arr in fields.items():
        blk = imap[name]
        z[blk.start:blk.stop] = np.asarray(arr, dtype=float).reshape(blk.n, blk.periods).T.ravel()
    return z


def duality_gap(case: DispatchCase, solution: DispatchSolution) -> float:
    """Primal objective minus Lagrange dual objective at the reported multipliers."""
    problem = DispatchProblem(case, solution.reg_eps)
    x, y, mu_lo, mu_up = problem.split(pack_solution(problem.layout, solution))
    lo, up = problem.bounds
    bi = problem.layout.bounded_primal_index
    primal = problem.q @ x + 0.5 * problem.reg_eps * x @ x
    # dual function evaluated at the minimiser of the Lagrangian in x
    grad_lin = problem.q + problem.a_eq.T @ y
    np.subtract.at(grad_lin, bi, mu_lo)
    np.add.at(grad_lin, bi, mu_up)
    xmin = -grad_lin / problem.reg_eps
    dual = (
        grad_lin @ xmin + 0.5 * problem.reg_eps * xmin @ xmin
        - y @ problem.b_eq() + mu_lo @ lo[bi] - mu_up @ up[bi]
    )
    return float(primal - dual)


def degenerate_constraints(case: DispatchCase, solution: DispatchSolution,
                           threshold: float = DEGENERACY_THRESHOLD) -> np.ndarray:
    """Indices (into the bounded vector) where multiplier and slack are both tiny."""
    problem = DispatchProblem(case, solution.reg_eps)
    x, _, mu_lo, mu_up = problem.split(pack_solution(problem.layout, solution))
    lo, up = problem.bounds
    bi = problem.layout.bounded_primal_index
    weak_lo = (np.abs(mu_lo) < threshold) & (np.abs(x[bi] - lo[bi]) < threshold)
    weak_up = (np.abs(mu_up) < threshold) & (np.abs(up[bi] - x[bi]) < threshold)
    return np.flatnonzero(weak_lo | weak_up)
