"""
Benchmark harness and analytic speedup model
============================================

Runtimes are the time spent in factorizations and triangular solves only;
dispatch solves, KKT assembly and block slicing are excluded. Each cell
(method, horizon, parallelism) is run ``trials`` times and the minimum is
reported. The speedup of a decentralized method is the minimum of its
centralized counterpart in the same mode at parallelism 1 divided by its
own minimum.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from dataclasses import asdict, dataclass, field

import numpy as np

from gridsens.central import lme_forward_central, lme_reverse_central
from gridsens.decentral import lme_forward_decentral, lme_reverse_decentral
from gridsens.dispatch import DEFAULT_REG_EPS, solve_dispatch
from gridsens.errors import GridSensError
from gridsens.kkt import assemble_kkt
from gridsens.model import generate_synthetic, load_case

__all__ = [
    "BenchConfig",
    "BenchCell",
    "BenchReport",
    "run_benchmark",
    "speedup_model",
    "fit_beta",
    "emit_report",
    "load_report",
    "METHODS",
    "CSV_COLUMNS",
]

METHODS = {
    "central_fwd": lme_forward_central,
    "central_rev": lme_reverse_central,
    "decentral_fwd": lme_forward_decentral,
    "decentral_rev": lme_reverse_decentral,
}
BASELINE = {"decentral_fwd": "central_fwd", "decentral_rev": "central_rev"}
CSV_COLUMNS = ("method", "T", "parallelism", "trial_min_seconds", "stage", "speedup")


@dataclass
class BenchConfig:
    """What to run.

    Either ``case_path`` (truncated to each horizon) or the synthetic
    parameters ``n_nodes``, ``n_batteries`` and ``seed`` define the cases.
    """

    horizons: list
    methods: list = field(default_factory=lambda: ["central_rev", "decentral_rev"])
    parallelism: list = field(default_factory=lambda: [1])
    trials: int = 10
    beta: float = 1.0
    case_path: str | None = None
    n_nodes: int = 20
    n_batteries: int = 2
    seed: int = 0
    reg_eps: float = DEFAULT_REG_EPS

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.horizons or any(int(T) < 1 for T in self.horizons):
            raise ValueError("horizons must be a non-empty list of integers >= 1")
        if not self.parallelism or any(int(p) < 1 for p in self.parallelism):
            raise ValueError("parallelism values must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise ValueError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
        self.horizons = [int(T) for T in self.horizons]
        self.parallelism = [int(p) for p in self.parallelism]

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    def case_for(self, horizon: int):
        if self.case_path is not None:
            return load_case(self.case_path).truncated(horizon)
        return generate_synthetic(self.n_nodes, self.n_batteries, horizon, self.seed)


@dataclass
class BenchCell:
    method: str
    T: int
    parallelism: int
    trial_min_seconds: float
    stages: dict
    trials: list
    speedup: float | None = None


@dataclass
class BenchReport:
    cells: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    def cell(self, method: str, T: int, parallelism: int = 1) -> BenchCell:
        for c in self.cells:
            if (c.method, c.T, c.parallelism) == (method, T, parallelism):
                return c
        raise KeyError((method, T, parallelism))


def _environment(config: BenchConfig, sizes: dict) -> dict:
    return {
        "worker_count": os.cpu_count(),
        "machine": f"{platform.node()} {platform.machine()} {platform.processor()}".strip(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "beta": config.beta,
        "trials": config.trials,
        **sizes,
    }


def run_benchmark(config: BenchConfig) -> BenchReport:
    """Time every (method, horizon, parallelism) cell of ``config``.

    Centralized counterparts of requested decentralized methods are added
    at parallelism 1 so that speedups can be formed. A failing horizon is
    recorded in ``report.errors`` and the remaining horizons still run.
    """
    methods = list(config.methods)
    for m in config.methods:
        base = BASELINE.get(m)
        if base and base not in methods:
            methods.append(base)
    report = BenchReport()
    sizes = {}
    for T in config.horizons:
        try:
            case = config.case_for(T)
            sol = solve_dispatch(case, config.reg_eps)
            kkt = assemble_kkt(case, sol)
        except GridSensError as exc:
            report.errors.append({"T": T, "error": f"{type(exc).__name__}: {exc}"})
            continue
        net = case.network
        sizes = {"N": net.n_nodes, "M": net.n_lines, "K": net.n_batteries, "n_bar": net.n_bar}
        for m in methods:
            pars = config.parallelism if m.startswith("decentral") or m == "central_fwd" else [1]
            if m in BASELINE.values() and m not in config.methods:
                pars = [1]
            for par in pars:
                times, best_stages = [], None
                try:
                    for _ in range(config.trials):
                        res = METHODS[m](case, sol, kkt=kkt, parallelism=par)
                        times.append(res.linear_solve_time)
                        if best_stages is None or times[-1] <= min(times):
                            best_stages = {k: v for k, v in res.timings.items() if k.startswith("solve:")}
                except GridSensError as exc:
                    report.errors.append({"T": T, "method": m, "parallelism": par,
                                          "error": f"{type(exc).__name__}: {exc}"})
                    continue
                report.cells.append(BenchCell(m, T, par, min(times), best_stages, times))
    for c in report.cells:
        base = BASELINE.get(c.method)
        if base is None:
            continue
        try:
            ref = report.cell(base, c.T, 1)
        except KeyError:
            continue
        c.speedup = ref.trial_min_seconds / c.trial_min_seconds if c.trial_min_seconds > 0 else None
    report.metadata = _environment(config, sizes)
    return report


def speedup_model(T: float, n_bar: float, K: float, beta: float, parallel: bool) -> float:
    """Predicted speedup of the decentralized scheme.

    Serial::

        T^b (N + K)^b / (T N^b + T^b K^b)

    Parallel over periods::

        T^b (N + K)^b / (N^b + T^b K^b)

    with ``N = n_bar``. Both are evaluated after dividing through by
    ``T^b``, so that ``beta = 1`` in serial mode cancels to exactly 1.
    """
    for name, v in (("T", T), ("n_bar", n_bar), ("K", K), ("beta", beta)):
        if not (isinstance(v, (int, float, np.integer, np.floating)) and math.isfinite(v) and v > 0):
            raise ValueError(f"{name} must be a positive finite number, got {v!r}")
    if not 1.0 <= beta <= 3.0:
        raise ValueError(f"beta must lie in [1, 3], got {beta}")
    T, n_bar, K, beta = float(T), float(n_bar), float(K), float(beta)
    lead = T ** (1.0 - beta) if not parallel else T ** (-beta)
    return (n_bar + K) ** beta / (lead * n_bar ** beta + K ** beta)


def fit_beta(report: BenchReport, method: str = "central_rev") -> float:
    """Slope of ``log(runtime)`` against ``log(T (n_bar + K))``.

    Uses the parallelism-1 cells of ``method``; needs at least 3 horizons.
    """
    meta = report.metadata
    try:
        size_per_t = float(meta["n_bar"]) + float(meta["K"])
    except KeyError as exc:
        raise ValueError("report metadata lacks n_bar/K") from exc
    pts = sorted(
        (c.T, c.trial_min_seconds) for c in report.cells
        if c.method == method and c.parallelism == 1 and c.trial_min_seconds > 0
    )
    if len({T for T, _ in pts}) < 3:
        raise ValueError(f"need runtimes for at least 3 horizons of {method}, got {len(pts)}")
    x = np.log([T * size_per_t for T, _ in pts])
    y = np.log([t for _, t in pts])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)


def _stage_string(stages: dict) -> str:
    return ";".join(f"{k.removeprefix('solve:')}={v:.6e}" for k, v in sorted(stages.items()))


def _report_to_dict(report: BenchReport) -> dict:
    return {
        "metadata": dict(sorted(report.metadata.items())),
        "cells": [asdict(c) for c in report.cells],
        "errors": report.errors,
    }


def emit_report(report: BenchReport, fmt: str, path) -> None:
    """Write ``report`` as JSON or CSV (one row per cell)."""
    if fmt == "json":
        text = json.dumps(_report_to_dict(report), indent=1)
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in report.cells:
            w.writerow([
                c.method, c.T, c.parallelism, repr(c.trial_min_seconds), _stage_string(c.stages),
                "" if c.speedup is None else repr(c.speedup),
            ])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}; use 'json' or 'csv'")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def load_report(path) -> BenchReport:
    """Read a JSON report written by :func:`emit_report`."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return BenchReport(
        cells=[BenchCell(**c) for c in data["cells"]],
        metadata=data["metadata"],
        errors=data.get("errors", []),
    )
