"""
Grid and case data types
========================

A :class:`Network` holds the static topology (lines, batteries, limits) and a
:class:`DispatchCase` adds the time-varying data over a horizon of ``T``
periods. Node, line and battery indices are 0-based in memory and 1-based in
the case file.

All arrays are stored read-only so the objects can be shared between worker
threads without copying.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import numpy as np
import scipy.sparse as sp

from gridsens.errors import CaseFormatError, CaseValidationError

__all__ = [
    "Network",
    "DispatchCase",
    "Violation",
    "validate_case",
    "load_case",
    "save_case",
    "load_bundled_case",
    "generate_synthetic",
    "is_connected",
]


def _frozen(values, dtype=float, ndim=1) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0,) * ndim) if ndim == 1 else arr.reshape(arr.shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Network:
    """Static grid topology and device limits.

    Parameters
    ----------
    n_nodes : int
        Number of buses ``N``.
    line_from, line_to : array of int, shape (M,)
        0-based endpoints of each line. ``line_from`` carries the +1 entry of
        the node-branch incidence matrix and ``line_to`` the -1 entry.
    susceptance, f_max : array, shape (M,)
        Line susceptance (flow per radian) and thermal limit [MW].
    battery_nodes : array of int, shape (K,)
        0-based host node of each battery.
    p_max, s_max, s_init, s_final : array, shape (K,)
        Power limit [MW], energy capacity [MWh], initial and final state of
        charge [MWh].
    """

    n_nodes: int
    line_from: np.ndarray
    line_to: np.ndarray
    susceptance: np.ndarray
    f_max: np.ndarray
    battery_nodes: np.ndarray
    p_max: np.ndarray
    s_max: np.ndarray
    s_init: np.ndarray
    s_final: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n_nodes", int(self.n_nodes))
        for name in ("line_from", "line_to", "battery_nodes"):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype=np.int64))
        for name in ("susceptance", "f_max", "p_max", "s_max", "s_init", "s_final"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def n_lines(self) -> int:
        return int(self.line_from.shape[0])

    @property
    def n_batteries(self) -> int:
        return int(self.battery_nodes.shape[0])

    @property
    def n_bar(self) -> int:
        """Physical network dimension ``N + M + K``."""
        return self.n_nodes + self.n_lines + self.n_batteries

    def incidence(self) -> sp.csr_matrix:
        """Node-branch incidence matrix ``A`` (N x M), +1 at ``from``, -1 at ``to``."""
        m = np.arange(self.n_lines)
        rows = np.concatenate([self.line_from, self.line_to])
        cols = np.concatenate([m, m])
        vals = np.concatenate([np.ones(self.n_lines), -np.ones(self.n_lines)])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.n_nodes, self.n_lines))

    def battery_incidence(self) -> sp.csr_matrix:
        """Node-battery incidence matrix ``B`` (N x K)."""
        k = np.arange(self.n_batteries)
        return sp.csr_matrix(
            (np.ones(self.n_batteries), (self.battery_nodes, k)),
            shape=(self.n_nodes, self.n_batteries),
        )

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        if self.n_nodes != other.n_nodes:
            return False
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in (
                "line_from", "line_to", "susceptance", "f_max", "battery_nodes",
                "p_max", "s_max", "s_init", "s_final",
            )
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DispatchCase:
    """Network plus per-period data, every matrix shaped ``(N, T)``."""

    network: Network
    horizon: int
    cost: np.ndarray
    demand: np.ndarray
    g_max: np.ndarray
    emissions_rate: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "horizon", int(self.horizon))
        for name in ("cost", "demand", "g_max", "emissions_rate"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            if arr.ndim == 1 and arr.size == 0:
                arr = arr.reshape(self.network.n_nodes, 0)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_nodes(self) -> int:
        return self.network.n_nodes

    @property
    def shape(self) -> tuple[int, int]:
        return (self.network.n_nodes, self.horizon)

    def with_demand(self, demand) -> "DispatchCase":
        """Copy of the case with a different demand matrix."""
        return DispatchCase(
            self.network, self.horizon, self.cost, demand, self.g_max, self.emissions_rate
        )

    def with_emissions(self, emissions_rate) -> "DispatchCase":
        return DispatchCase(
            self.network, self.horizon, self.cost, self.demand, self.g_max, emissions_rate
        )

    def truncated(self, horizon: int) -> "DispatchCase":
        """First ``horizon`` periods of the case (storage boundary values kept)."""
        if not 1 <= horizon <= self.horizon:
            raise ValueError(f"horizon must be in [1, {self.horizon}], got {horizon}")
        sl = slice(0, horizon)
        return DispatchCase(
            self.network, horizon, self.cost[:, sl], self.demand[:, sl],
            self.g_max[:, sl], self.emissions_rate[:, sl],
        )

    def __eq__(self, other):
        if not isinstance(other, DispatchCase):
            return NotImplemented
        return (
            self.network == other.network
            and self.horizon == other.horizon
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("cost", "demand", "g_max", "emissions_rate")
            )
        )

    __hash__ = None


@dataclass(frozen=True)
class Violation:
    """One broken invariant. ``index`` is the offending 0-based entity index, if any."""

    code: str
    message: str
    index: Any = None


def _check_vector(out, name, arr, size, code_prefix="shape"):
    if arr.shape != (size,):
        out.append(Violation(f"{code_prefix}_{name}", f"{name} has shape {arr.shape}, expected ({size},)"))
        return False
    if not np.all(np.isfinite(arr)):
        out.append(Violation(f"nonfinite_{name}", f"{name} contains non-finite values"))
        return False
    return True


def validate_case(case: DispatchCase) -> list[Violation]:
    """Return every invariant violation of ``case`` (empty list when valid)."""
    out: list[Violation] = []
    net = case.network
    n, t = net.n_nodes, case.horizon
    if n < 1:
        out.append(Violation("n_nodes", f"n_nodes must be >= 1, got {n}"))
    if t < 1:
        out.append(Violation("horizon", f"horizon must be >= 1, got {t}"))

    m = net.line_from.shape[0]
    ok_lines = net.line_to.shape == (m,)
    if not ok_lines:
        out.append(Violation("shape_line_to", "line_from and line_to differ in length"))
    else:
        for i in range(m):
            a, b = int(net.line_from[i]), int(net.line_to[i])
            if not (0 <= a < n and 0 <= b < n):
                out.append(Violation("line_endpoint_range", f"line {i} endpoint outside [0, {n})", i))
            elif a == b:
                out.append(Violation("line_self_loop", f"line {i} connects node {a} to itself", i))
    if _check_vector(out, "susceptance", net.susceptance, m):
        for i in np.flatnonzero(net.susceptance <= 0):
            out.append(Violation("susceptance_nonpositive", f"line {i} susceptance must be > 0", int(i)))
    if _check_vector(out, "f_max", net.f_max, m):
        for i in np.flatnonzero(net.f_max < 0):
            out.append(Violation("f_max_negative", f"line {i} f_max must be >= 0", int(i)))

    k = net.battery_nodes.shape[0]
    for i in range(k):
        if not 0 <= int(net.battery_nodes[i]) < n:
            out.append(Violation("battery_node_range", f"battery {i} node outside [0, {n})", i))
    shapes_ok = all(
        _check_vector(out, name, getattr(net, name), k)
        for name in ("p_max", "s_max", "s_init", "s_final")
    )
    if shapes_ok:
        for i in np.flatnonzero(net.p_max < 0):
            out.append(Violation("p_max_negative", f"battery {i} p_max must be >= 0", int(i)))
        for i in np.flatnonzero(net.s_max < 0):
            out.append(Violation("s_max_negative", f"battery {i} s_max must be >= 0", int(i)))
        for i in np.flatnonzero((net.s_init < 0) | (net.s_init > net.s_max)):
            out.append(Violation("s_init_range", f"battery {i} s_init outside [0, s_max]", int(i)))
        for i in np.flatnonzero((net.s_final < 0) | (net.s_final > net.s_max)):
            out.append(Violation("s_final_range", f"battery {i} s_final outside [0, s_max]", int(i)))

    for name in ("cost", "demand", "g_max", "emissions_rate"):
        arr = getattr(case, name)
        if arr.shape != (n, t):
            out.append(Violation(f"shape_{name}", f"{name} has shape {arr.shape}, expected ({n}, {t})"))
            continue
        if not np.all(np.isfinite(arr)):
            out.append(Violation(f"nonfinite_{name}", f"{name} contains non-finite values"))
            continue
        if name in ("demand", "g_max"):
            for nn, tt in zip(*np.nonzero(arr < 0)):
                out.append(Violation(f"{name}_negative", f"{name}[{nn}, {tt}] < 0", (int(nn), int(tt))))
    return out


# -- case file -----------------------------------------------------------------

_REQUIRED = ("n_nodes", "horizon", "lines", "batteries", "cost", "demand", "g_max", "emissions_rate")


def _case_to_dict(case: DispatchCase) -> dict:
    net = case.network
    lines = [
        {
            "from": int(net.line_from[i]) + 1,
            "to": int(net.line_to[i]) + 1,
            "susceptance": float(net.susceptance[i]),
            "f_max": float(net.f_max[i]),
        }
        for i in range(net.n_lines)
    ]
    batteries = [
        {
            "node": int(net.battery_nodes[i]) + 1,
            "p_max": float(net.p_max[i]),
            "s_max": float(net.s_max[i]),
            "s_init": float(net.s_init[i]),
            "s_final": float(net.s_final[i]),
        }
        for i in range(net.n_batteries)
    ]
    doc = {"n_nodes": net.n_nodes, "horizon": case.horizon, "lines": lines, "batteries": batteries}
    for name in ("cost", "demand", "g_max", "emissions_rate"):
        doc[name] = [[float(v) for v in row] for row in getattr(case, name)]
    return doc


def _get(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise CaseFormatError(f"{where}: expected an object")
    if key not in obj:
        raise CaseFormatError(f"{where}: missing key '{key}'")
    return obj[key]


def _case_from_dict(doc: Any) -> DispatchCase:
    for key in _REQUIRED:
        _get(doc, key, "case")
    try:
        n_nodes = int(doc["n_nodes"])
        horizon = int(doc["horizon"])
        lines = doc["lines"]
        batteries = doc["batteries"]
        line_from = [int(_get(l, "from", f"lines[{i}]")) - 1 for i, l in enumerate(lines)]
        line_to = [int(_get(l, "to", f"lines[{i}]")) - 1 for i, l in enumerate(lines)]
        susc = [float(_get(l, "susceptance", f"lines[{i}]")) for i, l in enumerate(lines)]
        fmax = [float(_get(l, "f_max", f"lines[{i}]")) for i, l in enumerate(lines)]
        bat = {
            key: [float(_get(b, key, f"batteries[{i}]")) for i, b in enumerate(batteries)]
            for key in ("p_max", "s_max", "s_init", "s_final")
        }
        bnodes = [int(_get(b, "node", f"batteries[{i}]")) - 1 for i, b in enumerate(batteries)]
        mats = {}
        for name in ("cost", "demand", "g_max", "emissions_rate"):
            arr = np.array(doc[name], dtype=float)
            if arr.size == 0:
                arr = arr.reshape(n_nodes, 0) if n_nodes else arr.reshape(0, 0)
            mats[name] = arr
    except CaseFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise CaseFormatError(f"malformed case: {exc}") from exc

    network = Network(
        n_nodes=n_nodes,
        line_from=line_from,
        line_to=line_to,
        susceptance=susc,
        f_max=fmax,
        battery_nodes=bnodes,
        **bat,
    )
    return DispatchCase(network, horizon, **mats)


def save_case(case: DispatchCase, path) -> None:
    """Write ``case`` as a UTF-8 JSON document (byte-stable for equal cases)."""
    text = json.dumps(_case_to_dict(case), indent=1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_case(path, validate: bool = True) -> DispatchCase:
    """Read a case file.

    Raises
    ------
    CaseFormatError
        The file is not valid JSON or misses a required key.
    CaseValidationError
        The case parses but breaks an invariant (only when ``validate``).
    """
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"{os.fspath(path)}: not valid JSON ({exc})") from exc
    case = _case_from_dict(doc)
    if validate:
        violations = validate_case(case)
        if violations:
            raise CaseValidationError(violations)
    return case


def load_bundled_case(name: str = "case2b") -> DispatchCase:
    """Load a case shipped inside the package (``case2b``, ``trivial1``)."""
    ref = resources.files("gridsens").joinpath("data").joinpath(f"{name}.json")
    with resources.as_file(ref) as path:
        return load_case(path)


# -- synthetic cases -----------------------------------------------------------


def is_connected(network: Network) -> bool:
    """Breadth-first search from node 0 reaches every node."""
    n = network.n_nodes
    adj = [[] for _ in range(n)]
    for a, b in zip(network.line_from, network.line_to):
        adj[a].append(b)
        adj[b].append(a)
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                queue.append(v)
    return bool(seen.all())


def generate_synthetic(
    n_nodes: int,
    n_batteries: int,
    horizon: int,
    seed: int,
    n_extra_lines: int | None = None,
) -> DispatchCase:
    """Random connected, feasible case with a daily demand cycle.

    The network is a random spanning tree plus ``n_extra_lines`` extra lines
    (default ``n_nodes // 2``). Every node's generator can cover 1.2x its own
    demand, so the case is feasible with zero flows. Batteries sit at the
    highest-peak-demand nodes; their energy capacities sum to 10% of the peak
    total demand (times one hour), their power ratings are 1.1 to 1.5 times
    that capacity, and they start and end half full.
    """
    if n_nodes < 1:
        raise ValueError(f"n_nodes must be >= 1, got {n_nodes}")
    if not 0 <= n_batteries <= n_nodes:
        raise ValueError(f"n_batteries must be in [0, n_nodes={n_nodes}], got {n_batteries}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if n_extra_lines is None:
        n_extra_lines = n_nodes // 2
    if n_extra_lines < 0:
        raise ValueError("n_extra_lines must be >= 0")
    rng = np.random.default_rng(seed)
    N, T, K = n_nodes, horizon, n_batteries

    # spanning tree, then extra non-duplicate lines
    order = rng.permutation(N)
    pairs = []
    for i in range(1, N):
        j = int(rng.integers(0, i))
        pairs.append((int(order[i]), int(order[j])))
    existing = {frozenset(p) for p in pairs}
    max_extra = N * (N - 1) // 2 - len(pairs)
    n_extra = min(n_extra_lines, max_extra)
    while n_extra > 0:
        a, b = (int(x) for x in rng.choice(N, size=2, replace=False))
        if frozenset((a, b)) in existing:
            continue
        existing.add(frozenset((a, b)))
        pairs.append((a, b))
        n_extra -= 1
    M = len(pairs)
    line_from = np.array([p[0] for p in pairs], dtype=np.int64)
    line_to = np.array([p[1] for p in pairs], dtype=np.int64)
    susceptance = rng.uniform(5.0, 20.0, size=M)

    hours = np.arange(T)
    shape = 1.0 + 0.3 * np.sin(2 * np.pi * (hours - 8) / 24.0)
    base = rng.uniform(10.0, 50.0, size=N)
    demand = base[:, None] * shape[None, :] * rng.uniform(0.95, 1.05, size=(N, T))
    g_max = 1.2 * demand + rng.uniform(0.0, 1.0, size=(N, T)) * base.mean()

    base_cost = rng.uniform(10.0, 80.0, size=N)
    phase = rng.uniform(0.0, 2 * np.pi, size=N)
    cost = base_cost[:, None] * (
        1.0 + 0.15 * np.sin(2 * np.pi * hours[None, :] / 24.0 + phase[:, None])
    )
    rate = np.clip(1.1 - base_cost / 80.0 + rng.normal(0.0, 0.1, size=N), 0.0, None)
    emissions = rate[:, None] * rng.uniform(0.97, 1.03, size=(N, T))

    f_max = rng.uniform(0.2, 1.0, size=M) * base.mean()

    peak = demand.max(axis=1)
    battery_nodes = np.sort(np.argsort(-peak, kind="stable")[:K])
    total_energy = 0.10 * demand.sum(axis=0).max()
    weights = rng.uniform(0.5, 1.5, size=K)
    s_max = total_energy * weights / weights.sum() if K else np.zeros(0)
    # power limits above the energy capacity never bind: a full charge/discharge
    # cycle at rated power would otherwise make the active constraints linearly
    # dependent (non-unique multipliers, singular KKT Jacobian)
    p_max = s_max * rng.uniform(1.1, 1.5, size=K)
    s_half = s_max / 2.0

    network = Network(
        n_nodes=N,
        line_from=line_from,
        line_to=line_to,
        susceptance=susceptance,
        f_max=f_max,
        battery_nodes=battery_nodes,
        p_max=p_max,
        s_max=s_max,
        s_init=s_half,
        s_final=s_half,
    )
    return DispatchCase(network, T, cost, demand, g_max, emissions)
