"""
Ground truth for LME computations
=================================

Total emissions ``H(d) = sum(e * g*(d))``, a central finite-difference LME
oracle that re-solves the dispatch for each perturbed demand, and a
comparison report used by the tests and the command line.

The oracle never touches ``d1F``; perturbed problems are re-solved either by
re-using the base active set (one sparse factorization of the reduced
equality-constrained QP, checked for primal feasibility and multiplier
signs) or, when that check fails, by a cold call to :func:`solve_dispatch`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from gridsens.dispatch import (
    DEFAULT_REG_EPS,
    DEFAULT_TOL,
    DispatchSolution,
    degenerate_constraints,
    pack_solution,
    solve_dispatch,
)
from gridsens.errors import CaseValidationError, InfeasibleError
from gridsens.model import DispatchCase
from gridsens.parallel import parallel_map
from gridsens.problem import DispatchProblem
from gridsens.qp import ActiveSetResolver

__all__ = [
    "Method",
    "LmeResult",
    "total_emissions",
    "lme_finite_difference",
    "compare_lme",
    "ComparisonReport",
    "DEFAULT_FD_STEP",
]

DEFAULT_FD_STEP = 1e-4
# one-sided slopes that differ by more than this (relative to max(1, |central|))
# mark a kink between d - h and d + h
FD_KINK_RTOL = 1e-4


class Method(str, enum.Enum):
    CENTRAL_FWD = "central_fwd"
    CENTRAL_REV = "central_rev"
    DECENTRAL_FWD = "decentral_fwd"
    DECENTRAL_REV = "decentral_rev"
    FINITE_DIFF = "finite_diff"


@dataclass(eq=False)
class LmeResult:
    """Locational marginal emission rates and how they were obtained.

    Attributes
    ----------
    lam : ndarray, shape (N, T)
        LMEs in tCO2/MWh.
    method : Method
    timings : dict[str, float]
        Seconds per stage. Stages whose name starts with ``solve:`` are the
        factorizations and triangular solves; :attr:`linear_solve_time` sums
        them.
    degeneracy_flag : bool
        Set when some bound has multiplier and slack both below ``1e-7`` (or,
        for the finite-difference oracle, when a kink was detected).
    degenerate_mask : ndarray of bool or None
        Entry-wise kink flags (finite-difference oracle only).
    counters : dict
        Snapshot of :class:`gridsens.parallel.OpCounter`.
    """

    lam: np.ndarray
    method: Method
    timings: dict = field(default_factory=dict)
    degeneracy_flag: bool = False
    degenerate_mask: np.ndarray | None = None
    counters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.method = Method(self.method)
        self.lam = np.asarray(self.lam, dtype=float)
        if not np.all(np.isfinite(self.lam)):
            raise ValueError("LME values must be finite")
        if any(v < 0 for v in self.timings.values()):
            raise ValueError("timings must be nonnegative")

    @property
    def linear_solve_time(self) -> float:
        return float(sum(v for k, v in self.timings.items() if k.startswith("solve:")))


def total_emissions(case: DispatchCase, solution: DispatchSolution) -> float:
    """``sum_{n,t} e[n, t] * g[n, t]``."""
    if case.emissions_rate.shape != solution.g.shape:
        raise ValueError("emissions and generation shapes differ")
    return float(np.sum(case.emissions_rate * solution.g))


def solution_degenerate(case: DispatchCase, solution: DispatchSolution) -> bool:
    return degenerate_constraints(case, solution).size > 0


class _Resolver:
    """Re-solves the dispatch at perturbed demands, returning total emissions."""

    def __init__(self, case, solution, reg_eps, tol):
        self.case = case
        self.reg_eps = reg_eps
        self.tol = tol
        self.problem = DispatchProblem(case, reg_eps)
        lay = self.problem.layout
        self.e = case.emissions_rate.T.ravel()
        g = lay.primal["g"]
        self.g_slice = slice(g.start, g.stop)
        x, _, mu_lo, mu_up = self.problem.split(pack_solution(lay, solution))
        lo, up = self.problem.bounds
        bi = lay.bounded_primal_index
        act_lo = np.zeros(lay.n_primal, dtype=bool)
        act_up = np.zeros(lay.n_primal, dtype=bool)
        act_lo[bi] = mu_lo > x[bi] - lo[bi]
        act_up[bi] = mu_up > up[bi] - x[bi]
        try:
            self.warm = ActiveSetResolver(
                self.problem.q, self.problem.hess, self.problem.a_eq, lo, up, act_lo, act_up
            )
        except RuntimeError:
            self.warm = None

    def emissions(self, demand) -> float | None:
        """``H(demand)``, or ``None`` when the perturbed problem is infeasible
        or invalid (a step below zero demand)."""
        if self.warm is not None:
            x, _, _, _, ok, _ = self.warm.solve(self.problem.b_eq(demand))
            if ok:
                return float(self.e @ x[self.g_slice])
        try:
            sol = solve_dispatch(self.case.with_demand(demand), self.reg_eps, self.tol)
        except (InfeasibleError, CaseValidationError):
            return None
        return total_emissions(self.case, sol)


def lme_finite_difference(
    case: DispatchCase,
    step: float = DEFAULT_FD_STEP,
    reg_eps: float = DEFAULT_REG_EPS,
    tol: float = DEFAULT_TOL,
    parallelism: int = 1,
    solution: DispatchSolution | None = None,
) -> LmeResult:
    """Central-difference LMEs ``[H(d + h e_nt) - H(d - h e_nt)] / 2h``.

    ``h = step * max(1, |d_nt|)``. An entry is flagged in
    ``degenerate_mask`` when the two one-sided slopes disagree (a change of
    active set between ``d - h`` and ``d + h``), or when one side is
    infeasible; in the latter case the feasible one-sided slope is reported.

    Raises
    ------
    InfeasibleError
        The base problem, or both perturbations of some entry, are infeasible.
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    if solution is None:
        solution = solve_dispatch(case, reg_eps, tol)
    resolver = _Resolver(case, solution, reg_eps, tol)
    base = total_emissions(case, solution)
    N, T = case.demand.shape
    d0 = case.demand

    def column(t):
        out = np.zeros((N, 2))
        for n in range(N):
            h = step * max(1.0, abs(d0[n, t]))
            d = d0.copy()
            d[n, t] = d0[n, t] + h
            hp = resolver.emissions(d)
            d[n, t] = d0[n, t] - h
            hm = resolver.emissions(d)
            if hp is None and hm is None:
                raise InfeasibleError(f"demand entry ({n}, {t}) infeasible in both directions")
            fwd = (hp - base) / h if hp is not None else None
            bwd = (base - hm) / h if hm is not None else None
            if fwd is not None and bwd is not None:
                central = (hp - hm) / (2.0 * h)
                kink = abs(fwd - bwd) > FD_KINK_RTOL * max(1.0, abs(central))
            else:
                central = fwd if fwd is not None else bwd
                kink = True
            out[n] = central, float(kink)
        return out

    cols = parallel_map(column, range(T), parallelism)
    lam = np.stack([c[:, 0] for c in cols], axis=1)
    mask = np.stack([c[:, 1] > 0 for c in cols], axis=1)
    return LmeResult(
        lam, Method.FINITE_DIFF, degeneracy_flag=bool(mask.any()), degenerate_mask=mask
    )


@dataclass(frozen=True)
class ComparisonReport:
    max_abs_diff: float
    max_rel_diff: float
    worst: tuple
    compared: int

    def __str__(self) -> str:
        n, t = self.worst
        return (
            f"max_abs_diff={self.max_abs_diff:.3e} max_rel_diff={self.max_rel_diff:.3e} "
            f"worst=(node {n + 1}, period {t + 1}) compared={self.compared}"
        )


def compare_lme(a: LmeResult, b: LmeResult, mask=None) -> ComparisonReport:
    """Elementwise differences between two LME results.

    ``mask`` (boolean, same shape) excludes entries from the comparison; by
    default the union of both results' ``degenerate_mask`` is excluded.
    The relative difference divides by ``max(1e-9, |a|, |b|)``. ``worst`` is
    the 0-based ``(n, t)`` of the largest absolute difference.
    """
    la, lb = np.asarray(a.lam), np.asarray(b.lam)
    if la.shape != lb.shape:
        raise ValueError(f"shape mismatch {la.shape} vs {lb.shape}")
    if mask is None:
        mask = np.zeros(la.shape, dtype=bool)
        for r in (a, b):
            if r.degenerate_mask is not None:
                mask = mask | r.degenerate_mask
    keep = ~np.asarray(mask, dtype=bool)
    diff = np.where(keep, np.abs(la - lb), 0.0)
    denom = np.maximum(1e-9, np.maximum(np.abs(la), np.abs(lb)))
    rel = diff / denom
    if diff.size == 0:
        return ComparisonReport(0.0, 0.0, (0, 0), 0)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return ComparisonReport(
        float(diff.max()), float(rel.max()), (int(worst[0]), int(worst[1])), int(keep.sum())
    )
