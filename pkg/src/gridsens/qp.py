"""
Box-constrained convex QP solver
================================

Solves

    minimize    q^T x + 1/2 sum_i h_i x_i^2
    subject to  A x = b,  lo <= x <= up

with a Mehrotra predictor-corrector interior point method, then "polishes"
the result: the bounds the IPM identifies as active are fixed and the
remaining equality-constrained QP is solved directly. A polished point has
exactly zero slack on active bounds and exactly zero multipliers on inactive
ones, so the KKT map vanishes to rounding error.

Multiplier signs follow the Lagrangian

    q^T x + 1/2 x^T H x + y^T (A x - b) + z_lo^T (lo - x) + z_up^T (x - up).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from gridsens.errors import InfeasibleError, SolverError

log = logging.getLogger(__name__)

__all__ = ["QPResult", "solve_qp", "ActiveSetResolver", "check_feasible"]


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    z_lo: np.ndarray
    z_up: np.ndarray
    iterations: int
    polished: bool
    active_lo: np.ndarray
    active_up: np.ndarray


def _splu(mat, **kw):
    return spla.splu(sp.csc_matrix(mat), **kw)


def check_feasible(A, b, lo, up) -> bool:
    """Phase-1 feasibility test with HiGHS (used only to classify IPM failures)."""
    from scipy.optimize import linprog

    bounds = [
        (None if not np.isfinite(l) else l, None if not np.isfinite(u) else u)
        for l, u in zip(lo, up)
    ]
    res = linprog(np.zeros(A.shape[1]), A_eq=A, b_eq=b, bounds=bounds, method="highs")
    return res.status != 2


def _step_to_boundary(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(q, h, A, b, lo, up, tol, max_iter):
    # iterates of an infeasible problem diverge; the finiteness check below
    # stops them, so silence the overflow noise on the way there
    with np.errstate(over="ignore", invalid="ignore"):
        return _ipm_loop(q, h, A, b, lo, up, tol, max_iter)


def _ipm_loop(q, h, A, b, lo, up, tol, max_iter):
    m, n = A.shape
    has_lo = np.isfinite(lo)
    has_up = np.isfinite(up)
    lo_f = np.where(has_lo, lo, 0.0)
    up_f = np.where(has_up, up, 0.0)
    n_comp = int(has_lo.sum() + has_up.sum())

    # start strictly inside the box
    x = np.zeros(n)
    both = has_lo & has_up
    x[both] = 0.5 * (lo_f[both] + up_f[both])
    only_lo = has_lo & ~has_up
    x[only_lo] = lo_f[only_lo] + 1.0
    only_up = has_up & ~has_lo
    x[only_up] = up_f[only_up] - 1.0
    width = np.where(both, up_f - lo_f, 2.0)
    pad = np.minimum(1.0, 0.5 * width)
    sl = np.where(has_lo, np.maximum(x - lo_f, pad), 0.0)
    su = np.where(has_up, np.maximum(up_f - x, pad), 0.0)
    scale = max(1.0, float(np.abs(q).max(initial=0.0)))
    z_lo = np.where(has_lo, scale, 0.0)
    z_up = np.where(has_up, scale, 0.0)
    y = np.zeros(m)

    At = A.T.tocsr()
    bnorm = 1.0 + float(np.abs(b).max(initial=0.0))
    qnorm = 1.0 + float(np.abs(q).max(initial=0.0))
    delta_p, delta_d = 1e-11, 1e-11
    eye_m = sp.identity(m, format="csc")

    for it in range(1, max_iter + 1):
        sl = np.where(has_lo, x - lo_f, 0.0)
        su = np.where(has_up, up_f - x, 0.0)
        r_d = q + h * x + At @ y - z_lo + z_up
        r_p = A @ x - b
        mu = (float(sl @ z_lo + su @ z_up) / n_comp) if n_comp else 0.0
        if (
            np.abs(r_p).max(initial=0.0) <= tol * bnorm
            and np.abs(r_d).max(initial=0.0) <= tol * qnorm
            and mu <= tol
        ):
            return x, y, z_lo, z_up, it, True
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_sl = np.where(has_lo, 1.0 / np.where(has_lo, sl, 1.0), 0.0)
            inv_su = np.where(has_up, 1.0 / np.where(has_up, su, 1.0), 0.0)
        D = h + z_lo * inv_sl + z_up * inv_su + delta_p
        kkt = sp.bmat([[sp.diags(D), At], [A, -delta_d * eye_m]], format="csc")
        try:
            lu = spla.splu(kkt, permc_spec="COLAMD")
        except RuntimeError as exc:
            raise SolverError(f"IPM Newton system singular at iteration {it}") from exc

        def newton(r_cl, r_cu):
            rhs_x = -r_d - r_cl * inv_sl + r_cu * inv_su
            rhs = np.concatenate([rhs_x, -r_p])
            sol = lu.solve(rhs)
            # one refinement sweep against the unregularised system
            res = rhs - kkt @ sol
            sol = sol + lu.solve(res)
            dx, dy = sol[:n], sol[n:]
            dz_lo = np.where(has_lo, (-r_cl - z_lo * dx) * inv_sl, 0.0)
            dz_up = np.where(has_up, (-r_cu + z_up * dx) * inv_su, 0.0)
            return dx, dy, dz_lo, dz_up

        def max_step(dx, dz_lo, dz_up):
            a = _step_to_boundary(sl[has_lo], dx[has_lo])
            a = min(a, _step_to_boundary(su[has_up], -dx[has_up]))
            a = min(a, _step_to_boundary(z_lo[has_lo], dz_lo[has_lo]))
            a = min(a, _step_to_boundary(z_up[has_up], dz_up[has_up]))
            return a

        # predictor
        dx_a, _, dzl_a, dzu_a = newton(sl * z_lo, su * z_up)
        a_aff = max_step(dx_a, dzl_a, dzu_a)
        if n_comp:
            mu_aff = float(
                (sl + a_aff * dx_a)[has_lo] @ (z_lo + a_aff * dzl_a)[has_lo]
                + (su - a_aff * dx_a)[has_up] @ (z_up + a_aff * dzu_a)[has_up]
            ) / n_comp
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        else:
            sigma = 0.0
        # corrector
        r_cl = np.where(has_lo, sl * z_lo + dx_a * dzl_a - sigma * mu, 0.0)
        r_cu = np.where(has_up, su * z_up - dx_a * dzu_a - sigma * mu, 0.0)
        dx, dy, dz_lo, dz_up = newton(r_cl, r_cu)
        alpha = min(1.0, 0.995 * max_step(dx, dz_lo, dz_up))
        x = x + alpha * dx
        y = y + alpha * dy
        z_lo = z_lo + alpha * dz_lo
        z_up = z_up + alpha * dz_up
        if not np.all(np.isfinite(x)) or np.abs(x).max(initial=0.0) > 1e12:
            break
    return x, y, z_lo, z_up, max_iter, False


def _kkt_parts(q, h, A, b, lo, up, x, y, z_lo, z_up):
    has_lo = np.isfinite(lo)
    has_up = np.isfinite(up)
    stat = q + h * x + A.T @ y - z_lo + z_up
    prim = A @ x - b
    comp = np.concatenate([
        (z_lo * np.where(has_lo, x - np.where(has_lo, lo, 0.0), 0.0)),
        (z_up * np.where(has_up, np.where(has_up, up, 0.0) - x, 0.0)),
    ])
    return stat, prim, comp


def kkt_error(q, h, A, b, lo, up, x, y, z_lo, z_up) -> float:
    """Infinity norm of stationarity, equality and complementarity residuals."""
    parts = _kkt_parts(q, h, A, b, lo, up, x, y, z_lo, z_up)
    return max(float(np.abs(p).max(initial=0.0)) for p in parts)


class ActiveSetResolver:
    """Solves the QP with a fixed set of active bounds, reusing one factorization.

    Only ``b`` may change between calls, so the reduced KKT matrix
    ``[[H_F, A_F^T], [A_F, 0]]`` over the free variables is factorized once.
    :meth:`solve` returns ``None`` when the fixed active set is not optimal
    for the given ``b`` (a bound is violated or a multiplier is negative).
    """

    def __init__(self, q, h, A, lo, up, active_lo, active_up, regularize=False):
        self.q, self.h, self.A = q, h, sp.csr_matrix(A)
        self.lo, self.up = lo, up
        self.active_lo = np.asarray(active_lo, dtype=bool)
        self.active_up = np.asarray(active_up, dtype=bool) & ~self.active_lo
        self.active = self.active_lo | self.active_up
        self.pinned = self.active_lo & np.isfinite(lo) & np.isfinite(up) & (up - lo <= 1e-12)
        self.free = np.flatnonzero(~self.active)
        self.fixed = np.flatnonzero(self.active)
        n, m = A.shape[1], A.shape[0]
        self.n, self.m = n, m
        self.x_fixed = np.where(self.active_lo, lo, np.where(self.active_up, up, 0.0))[self.fixed]
        A_csc = self.A.tocsc()
        self.A_free = A_csc[:, self.free]
        self.A_fixed = A_csc[:, self.fixed]
        nf = self.free.size
        mat = sp.bmat(
            [[sp.diags(h[self.free]), self.A_free.T], [self.A_free, sp.csc_matrix((m, m))]],
            format="csc",
        )
        self.mat = mat
        self.refine = 1
        if regularize:
            # redundant but consistent equality rows make ``mat`` singular;
            # factor a slightly shifted copy and refine against the true one
            shift = sp.diags(np.concatenate([np.zeros(nf), np.full(m, -1e-10)]), format="csc")
            self.lu = _splu(mat + shift)
            self.refine = 20
        else:
            self.lu = _splu(mat)  # RuntimeError when singular
        self.nf = nf
        self.A_T = self.A.T.tocsr()

    def solve(self, b, ptol=1e-9, dtol=1e-9):
        rhs = np.concatenate([-self.q[self.free], b - self.A_fixed @ self.x_fixed])
        sol = self.lu.solve(rhs)
        for _ in range(self.refine):
            sol = sol + self.lu.solve(rhs - self.mat @ sol)
        x = np.empty(self.n)
        x[self.free] = sol[:self.nf]
        x[self.fixed] = self.x_fixed
        y = sol[self.nf:]
        grad = self.q + self.h * x + self.A_T @ y
        z_lo = np.where(self.active_lo, grad, 0.0)
        z_up = np.where(self.active_up, -grad, 0.0)
        # a pinned variable (lo == up) takes either sign on its lower bound;
        # the negative part belongs to the upper one
        pin = self.pinned & (grad < 0)
        z_lo[pin] = 0.0
        z_up[pin] = -grad[pin]
        xf, lof, upf = x[self.free], self.lo[self.free], self.up[self.free]
        viol_lo = xf < lof - ptol * (1.0 + np.abs(lof))
        viol_up = xf > upf + ptol * (1.0 + np.abs(upf))
        gscale = 1.0 + float(np.abs(self.q).max(initial=0.0))
        neg_lo = z_lo < -dtol * gscale
        neg_up = z_up < -dtol * gscale
        ok = not (viol_lo.any() or viol_up.any() or neg_lo.any() or neg_up.any())
        return x, y, np.maximum(z_lo, 0.0), np.maximum(z_up, 0.0), ok, (viol_lo, viol_up, neg_lo, neg_up)


def _polish(q, h, A, b, lo, up, x, z_lo, z_up, max_rounds=25):
    has_lo = np.isfinite(lo)
    has_up = np.isfinite(up)
    sl = np.where(has_lo, x - np.where(has_lo, lo, 0.0), np.inf)
    su = np.where(has_up, np.where(has_up, up, 0.0) - x, np.inf)
    act_lo = has_lo & (z_lo > sl)
    act_up = has_up & (z_up > su) & ~act_lo
    fixed_var = has_lo & has_up & (up - lo <= 1e-12)
    act_lo |= fixed_var
    act_up &= ~fixed_var
    seen = set()
    for _ in range(max_rounds):
        key = (act_lo.tobytes(), act_up.tobytes())
        if key in seen:
            return None
        seen.add(key)
        try:
            res = ActiveSetResolver(q, h, A, lo, up, act_lo, act_up)
        except RuntimeError:
            try:
                res = ActiveSetResolver(q, h, A, lo, up, act_lo, act_up, regularize=True)
            except RuntimeError:
                return None
        xs, ys, zl, zu, ok, (vl, vu, nl, nu) = res.solve(b)
        if ok:
            return xs, ys, zl, zu, act_lo, act_up
        free = res.free
        act_lo = act_lo.copy()
        act_up = act_up.copy()
        act_lo[free[vl]] = True
        act_up[free[vu]] = True
        act_lo[nl & ~fixed_var] = False
        act_up[nu] = False
    return None


def solve_qp(q, h, A, b, lo, up, tol=1e-8, max_iter=150, polish=True) -> QPResult:
    """Solve the QP to KKT residual ``tol`` (infinity norm, absolute).

    Raises
    ------
    InfeasibleError
        No point satisfies the constraints.
    SolverError
        The IPM or the polish step could not reach ``tol``.
    """
    q = np.asarray(q, dtype=float)
    h = np.asarray(h, dtype=float)
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    lo = np.asarray(lo, dtype=float)
    up = np.asarray(up, dtype=float)
    if np.any(lo > up):
        raise InfeasibleError("a lower bound exceeds its upper bound")

    # fixed variables (lo == up) are handled as bounds during polishing but
    # would pin the IPM to the boundary, so widen them slightly there
    fixed = np.isfinite(lo) & np.isfinite(up) & (up - lo <= 1e-12)
    lo_i, up_i = lo.copy(), up.copy()
    lo_i[fixed] -= 1e-6
    up_i[fixed] += 1e-6

    ipm_tol = min(1e-9, tol * 1e-1)
    try:
        x, y, z_lo, z_up, iters, converged = _ipm(q, h, A, b, lo_i, up_i, ipm_tol, max_iter)
    except SolverError:
        # a diverging IPM on an infeasible problem ends in a singular Newton system
        if not check_feasible(A, b, lo, up):
            raise InfeasibleError("dispatch problem is infeasible (phase-1 certificate)") from None
        raise
    if not converged:
        if not check_feasible(A, b, lo, up):
            raise InfeasibleError("dispatch problem is infeasible (phase-1 certificate)")
        # retry polishing from wherever the IPM stopped before giving up
        log.debug("IPM did not converge in %d iterations", iters)

    if polish and np.all(np.isfinite(x)):
        out = _polish(q, h, A, b, lo, up, x, z_lo, z_up)
        if out is not None:
            xs, ys, zl, zu, al, au = out
            if kkt_error(q, h, A, b, lo, up, xs, ys, zl, zu) <= tol:
                return QPResult(xs, ys, zl, zu, iters, True, al, au)

    if converged and not np.any(fixed):
        err = kkt_error(q, h, A, b, lo, up, x, y, z_lo, z_up)
        if err <= tol:
            sl = np.where(np.isfinite(lo), x - np.where(np.isfinite(lo), lo, 0), np.inf)
            su = np.where(np.isfinite(up), np.where(np.isfinite(up), up, 0) - x, np.inf)
            return QPResult(x, y, z_lo, z_up, iters, False, z_lo > sl, z_up > su)
    if not converged:
        raise SolverError(f"interior point method did not converge in {max_iter} iterations")
    raise SolverError("could not reach the requested KKT tolerance")
