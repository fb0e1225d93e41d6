"""Seeded random case corpus used by the acceptance tests and demos."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gridsens.dispatch import DispatchSolution, solve_dispatch
from gridsens.errors import GridSensError
from gridsens.model import DispatchCase, generate_synthetic
from gridsens.oracle import solution_degenerate

__all__ = ["CorpusCase", "random_corpus"]


@dataclass(frozen=True, eq=False)
class CorpusCase:
    seed: int
    case: DispatchCase
    solution: DispatchSolution

    @property
    def label(self) -> str:
        net = self.case.network
        return f"seed{self.seed}-N{net.n_nodes}-M{net.n_lines}-K{net.n_batteries}-T{self.case.horizon}"


def random_corpus(n_cases: int = 50, master_seed: int = 2024, n_range=(5, 50), k_range=(0, 5),
                  t_range=(2, 48), max_draws: int | None = None) -> tuple[list[CorpusCase], int]:
    """Draw ``n_cases`` solvable, nondegenerate synthetic cases.

    Sizes are uniform over the closed ranges, with ``M`` uniform in
    ``[N - 1, 2N]`` (capped by the complete graph). A draw whose solution has
    a weakly active bound, or that fails to solve, is replaced by the next
    seed. Returns the cases and the number of rejected draws.
    """
    rng = np.random.default_rng(master_seed)
    max_draws = max_draws or 4 * n_cases
    out, rejected = [], 0
    for draw in range(max_draws):
        if len(out) == n_cases:
            break
        N = int(rng.integers(n_range[0], n_range[1] + 1))
        K = int(rng.integers(k_range[0], min(k_range[1], N) + 1))
        T = int(rng.integers(t_range[0], t_range[1] + 1))
        M = int(rng.integers(N - 1, 2 * N + 1))
        seed = int(rng.integers(0, 2**31 - 1))
        case = generate_synthetic(N, K, T, seed, n_extra_lines=M - (N - 1))
        try:
            sol = solve_dispatch(case)
        except GridSensError:
            rejected += 1
            continue
        if solution_degenerate(case, sol) or not sol.polished:
            rejected += 1
            continue
        out.append(CorpusCase(seed, case, sol))
    if len(out) < n_cases:
        raise RuntimeError(f"only {len(out)} usable cases after {max_draws} draws")
    return out, rejected
