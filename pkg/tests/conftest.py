import numpy as np
import pytest

from gridsens.dispatch import solve_dispatch
from gridsens.model import DispatchCase, Network, generate_synthetic, load_bundled_case


def one_node_case(demand=5.0, g_max=10.0, cost=1.0, rate=2.0) -> DispatchCase:
    net = Network(
        n_nodes=1, line_from=[], line_to=[], susceptance=[], f_max=[],
        battery_nodes=[], p_max=[], s_max=[], s_init=[], s_final=[],
    )
    arr = lambda v: np.array([[v]], dtype=float)
    return DispatchCase(net, 1, arr(cost), arr(demand), arr(g_max), arr(rate))


@pytest.fixture(scope="session")
def case2b():
    return load_bundled_case("case2b")


@pytest.fixture(scope="session")
def case2b_solution(case2b):
    return solve_dispatch(case2b)


@pytest.fixture(scope="session")
def trivial():
    return load_bundled_case("trivial1")


@pytest.fixture(scope="session")
def mid_case():
    """20 nodes, 2 batteries, one day."""
    case = generate_synthetic(20, 2, 24, 3)
    return case, solve_dispatch(case)


# verdict lines collected by the acceptance suite, echoed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
