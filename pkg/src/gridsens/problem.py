"""
Dispatch problem in vector form
===============================

Lays out the multi-period DC dispatch as

    minimize    q^T x + (eps/2) ||x||^2
    subject to  A_eq x = b_eq(d),   lo <= x <= up

and provides the KKT map ``F(z, d)`` together with its partial Jacobians.

Every variable or constraint family is stored period-major: entry ``(i, t)``
of a family with ``n`` entities per period sits at ``offset + t * n + i``.

Primal vector ``x``::

    g (T*N) | theta (T*N) | f (T*M) | p (T*K) | s ((T+1)*K)

Equality rows (and their duals ``y``)::

    balance  (T*N)  g + B p - d - A f = 0
    kirchhoff(T*M)  f - diag(b) A^T theta = 0
    ref      (T)    theta[0, t] = 0
    soc      (T*K)  s[:, t] - p[:, t] - s[:, t+1] = 0
    init     (K)    s[:, 0] - s_init = 0
    final    (K)    s[:, T] - s_final = 0

The ``soc`` row is written as "current minus discharge minus next" so that its
dual is the same number as the dual of the decoupled constraint
``s_next - s[:, t+1] = 0``.

Bounded primal entries (all but ``theta``) each carry a lower multiplier and
an upper multiplier; the Lagrangian is

    q^T x + eps/2 ||x||^2 + y^T (A_eq x - b_eq)
        + mu_lo^T (lo - x) + mu_up^T (x - up).

``z = [x, y, mu_lo, mu_up]`` and ``F(z, d)`` stacks stationarity, the
equality residuals, ``mu_lo * (x - lo)`` and ``mu_up * (up - x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from gridsens.model import DispatchCase

PRIMAL_FAMILIES = ("g", "theta", "f", "p", "s")
EQUALITY_FAMILIES = ("balance", "kirchhoff", "ref", "soc", "init", "final")
BOUNDED_FAMILIES = ("g", "f", "p", "s")


@dataclass(frozen=True)
class IndexBlock:
    """Contiguous range ``[start, stop)`` holding a family of shape ``(n, periods)``."""

    start: int
    n: int
    periods: int

    @property
    def stop(self) -> int:
        return self.start + self.n * self.periods

    @property
    def size(self) -> int:
        return self.n * self.periods

    def grid(self) -> np.ndarray:
        """Global indices arranged as ``(n, periods)``."""
        return np.arange(self.start, self.stop).reshape(self.periods, self.n).T

    def at(self, t: int) -> np.ndarray:
        """Indices of period ``t``."""
        return np.arange(self.start + t * self.n, self.start + (t + 1) * self.n)

    def unpack(self, vec: np.ndarray) -> np.ndarray:
        """Slice ``vec`` and reshape to ``(n, periods)``."""
        return vec[self.start:self.stop].reshape(self.periods, self.n).T.copy()

    def shifted(self, offset: int) -> "IndexBlock":
        return IndexBlock(self.start + offset, self.n, self.periods)


class Layout:
    """Sizes and offsets of every variable and constraint family for one case."""

    def __init__(self, n_nodes: int, n_lines: int, n_batteries: int, horizon: int):
        N, M, K, T = n_nodes, n_lines, n_batteries, horizon
        self.N, self.M, self.K, self.T = N, M, K, T

        shapes = {"g": (N, T), "theta": (N, T), "f": (M, T), "p": (K, T), "s": (K, T + 1)}
        self.primal = self._pack(shapes, PRIMAL_FAMILIES, 0)
        self.n_primal = self._end(self.primal)

        eq_shapes = {
            "balance": (N, T), "kirchhoff": (M, T), "ref": (1, T),
            "soc": (K, T), "init": (K, 1), "final": (K, 1),
        }
        self.equality = self._pack(eq_shapes, EQUALITY_FAMILIES, 0)
        self.n_eq = self._end(self.equality)

        # bounded entries, in primal order with theta skipped
        self.bounded = self._pack({f: shapes[f] for f in BOUNDED_FAMILIES}, BOUNDED_FAMILIES, 0)
        self.n_bounded = self._end(self.bounded)
        self.bounded_primal_index = np.concatenate(
            [np.arange(self.primal[f].start, self.primal[f].stop) for f in BOUNDED_FAMILIES]
        ).astype(np.int64)

        self.dim = self.n_primal + self.n_eq + 2 * self.n_bounded

    @staticmethod
    def _pack(shapes, order, offset):
        out = {}
        for name in order:
            n, periods = shapes[name]
            out[name] = IndexBlock(offset, n, periods)
            offset += n * periods
        return out

    @staticmethod
    def _end(blocks) -> int:
        return max((b.stop for b in blocks.values()), default=0)

    @classmethod
    def for_case(cls, case: DispatchCase) -> "Layout":
        net = case.network
        return cls(net.n_nodes, net.n_lines, net.n_batteries, case.horizon)

    # offsets of the four top-level parts of z
    @property
    def y_offset(self) -> int:
        return self.n_primal

    @property
    def lo_offset(self) -> int:
        return self.n_primal + self.n_eq

    @property
    def up_offset(self) -> int:
        return self.n_primal + self.n_eq + self.n_bounded

    def index_map(self) -> dict[str, IndexBlock]:
        """Location of every named block inside ``z`` (also the row order of F)."""
        out = dict(self.primal)
        for name, blk in self.equality.items():
            out["dual_" + name] = blk.shifted(self.y_offset)
        for name, blk in self.bounded.items():
            out["mult_lower_" + name] = blk.shifted(self.lo_offset)
            out["mult_upper_" + name] = blk.shifted(self.up_offset)
        return out

    def formula_dim(self) -> int:
        """``T(5N + 4M + 7K + 1) + 5K``."""
        return self.T * (5 * self.N + 4 * self.M + 7 * self.K + 1) + 5 * self.K


class DispatchProblem:
    """Vectorised data of the regularised dispatch QP for one case."""

    def __init__(self, case: DispatchCase, reg_eps: float):
        self.case = case
        self.reg_eps = float(reg_eps)
        self.layout = Layout.for_case(case)

    @cached_property
    def q(self) -> np.ndarray:
        lay = self.layout
        q = np.zeros(lay.n_primal)
        g = lay.primal["g"]
        q[g.start:g.stop] = self.case.cost.T.ravel()
        return q

    @cached_property
    def hess(self) -> np.ndarray:
        return np.full(self.layout.n_primal, self.reg_eps)

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lay, net, T = self.layout, self.case.network, self.case.horizon
        lo = np.full(lay.n_primal, -np.inf)
        up = np.full(lay.n_primal, np.inf)
        P = lay.primal
        lo[P["g"].start:P["g"].stop] = 0.0
        up[P["g"].start:P["g"].stop] = self.case.g_max.T.ravel()
        lo[P["f"].start:P["f"].stop] = np.tile(-net.f_max, T)
        up[P["f"].start:P["f"].stop] = np.tile(net.f_max, T)
        lo[P["p"].start:P["p"].stop] = np.tile(-net.p_max, T)
        up[P["p"].start:P["p"].stop] = np.tile(net.p_max, T)
        lo[P["s"].start:P["s"].stop] = 0.0
        up[P["s"].start:P["s"].stop] = np.tile(net.s_max, T + 1)
        return lo, up

    @cached_property
    def a_eq(self) -> sp.csr_matrix:
        lay, net = self.layout, self.case.network
        N, M, K, T = lay.N, lay.M, lay.K, lay.T
        A = net.incidence()
        B = net.battery_incidence()
        IT = sp.identity(T, format="csr")
        P = lay.primal

        def place(rows, fam, mat):
            return rows, P[fam].start, sp.csr_matrix(mat)

        blocks = []
        E = lay.equality
        blocks.append(place(E["balance"].start, "g", sp.identity(T * N)))
        if K:
            blocks.append(place(E["balance"].start, "p", sp.kron(IT, B)))
        if M:
            blocks.append(place(E["balance"].start, "f", -sp.kron(IT, A)))
            blocks.append(place(E["kirchhoff"].start, "f", sp.identity(T * M)))
            blocks.append(
                place(E["kirchhoff"].start, "theta", -sp.kron(IT, sp.diags(net.susceptance) @ A.T))
            )
        ref = sp.csr_matrix((np.ones(T), (np.arange(T), np.arange(T) * N)), shape=(T, T * N))
        blocks.append(place(E["ref"].start, "theta", ref))
        if K:
            eye = sp.identity(T * K, format="csr")
            cur = sp.hstack([eye, sp.csr_matrix((T * K, K))])
            nxt = sp.hstack([sp.csr_matrix((T * K, K)), eye])
            blocks.append(place(E["soc"].start, "s", cur - nxt))
            blocks.append(place(E["soc"].start, "p", -eye))
            first = sp.hstack([sp.identity(K), sp.csr_matrix((K, T * K))])
            last = sp.hstack([sp.csr_matrix((K, T * K)), sp.identity(K)])
            blocks.append(place(E["init"].start, "s", first))
            blocks.append(place(E["final"].start, "s", last))

        rows, cols, vals = [], [], []
        for r0, c0, mat in blocks:
            coo = mat.tocoo()
            rows.append(coo.row + r0)
            cols.append(coo.col + c0)
            vals.append(coo.data)
        out = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.n_eq, lay.n_primal),
        )
        out.sum_duplicates()
        return out

    def b_eq(self, demand: np.ndarray | None = None) -> np.ndarray:
        lay, net = self.layout, self.case.network
        d = self.case.demand if demand is None else np.asarray(demand, dtype=float)
        b = np.zeros(lay.n_eq)
        E = lay.equality
        b[E["balance"].start:E["balance"].stop] = d.T.ravel()
        b[E["init"].start:E["init"].stop] = net.s_init
        b[E["final"].start:E["final"].stop] = net.s_final
        return b

    @cached_property
    def demand_rows(self) -> np.ndarray:
        """Row of ``F`` (and of ``A_eq`` after the y offset) fed by each demand entry."""
        blk = self.layout.equality["balance"]
        return np.arange(blk.start, blk.stop) + self.layout.y_offset

    # -- KKT map -------------------------------------------------------------

    def split(self, z: np.ndarray):
        lay = self.layout
        x = z[:lay.n_primal]
        y = z[lay.y_offset:lay.lo_offset]
        mu_lo = z[lay.lo_offset:lay.up_offset]
        mu_up = z[lay.up_offset:]
        return x, y, mu_lo, mu_up

    def kkt_map(self, z: np.ndarray, demand: np.ndarray | None = None) -> np.ndarray:
        """Evaluate ``F(z, d)``."""
        lay = self.layout
        x, y, mu_lo, mu_up = self.split(z)
        lo, up = self.bounds
        bi = lay.bounded_primal_index
        xb = x[bi]
        stat = self.q + self.hess * x + self.a_eq.T @ y
        np.subtract.at(stat, bi, mu_lo)
        np.add.at(stat, bi, mu_up)
        eq = self.a_eq @ x - self.b_eq(demand)
        comp_lo = mu_lo * (xb - lo[bi])
        comp_up = mu_up * (up[bi] - xb)
        return np.concatenate([stat, eq, comp_lo, comp_up])

    def kkt_jacobian(self, z: np.ndarray) -> sp.csc_matrix:
        """``d F / d z`` with complementarity rows linearised in product form."""
        lay = self.layout
        x, _, mu_lo, mu_up = self.split(z)
        lo, up = self.bounds
        bi = lay.bounded_primal_index
        nb = lay.n_bounded
        Aeq = self.a_eq
        sel = sp.csr_matrix((np.ones(nb), (np.arange(nb), bi)), shape=(nb, lay.n_primal))
        H = sp.diags(self.hess)
        jac = sp.bmat(
            [
                [H, Aeq.T, -sel.T, sel.T],
                [Aeq, None, None, None],
                [sp.diags(mu_lo) @ sel, None, sp.diags(x[bi] - lo[bi]), None],
                [sp.diags(-mu_up) @ sel, None, None, sp.diags(up[bi] - x[bi])],
            ],
            format="csc",
        )
        return jac

    def demand_jacobian(self) -> sp.csc_matrix:
        """``d F / d d``: -1 on each balance row, columns ordered like ``g``."""
        lay = self.layout
        nt = lay.N * lay.T
        return sp.csc_matrix(
            (-np.ones(nt), (self.demand_rows, np.arange(nt))), shape=(lay.dim, nt)
        )
