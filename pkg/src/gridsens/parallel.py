"""Ordered parallel map and thread-safe operation counters."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

__all__ = ["parallel_map", "OpCounter"]


def parallel_map(fn, items, parallelism: int = 1) -> list:
    """Apply ``fn`` to each item and return the results in input order.

    With ``parallelism <= 1`` the map runs inline. Otherwise a thread pool of
    that size is used; SciPy's sparse LU releases the GIL during
    factorization and triangular solves, so threads give real concurrency
    for the per-period work. Any reduction over the results is left to the
    caller, which keeps it in a fixed order and the outcome bitwise
    independent of the worker count.
    """
    items = list(items)
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if parallelism == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(parallelism, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass
class OpCounter:
    """Counts linear-algebra work; safe to update from several threads.

    ``forward_solves`` and ``adjoint_solves`` count right-hand-side columns
    solved with ``A`` and ``A^T`` respectively. ``max_rhs_columns`` is the
    widest single solve call, a proxy for the largest dense intermediate.
    """

    factorizations: int = 0
    forward_solves: int = 0
    adjoint_solves: int = 0
    coupling_solves: int = 0
    max_rhs_columns: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def add(self, **counts) -> None:
        with self._lock:
            for name, value in counts.items():
                if name == "max_rhs_columns":
                    self.max_rhs_columns = max(self.max_rhs_columns, value)
                else:
                    setattr(self, name, getattr(self, name) + value)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if not f.name.startswith("_")}
