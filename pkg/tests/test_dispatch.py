import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridsens.dispatch import (
    degenerate_constraints,
    duality_gap,
    kkt_residual,
    solve_dispatch,
)
from gridsens.errors import CaseValidationError, InfeasibleError
from gridsens.model import generate_synthetic

from conftest import one_node_case
from lp_reference import solve_lp

# independent HiGHS solve of the unregularised LP (tests/lp_reference.py)
CASE2B_LP_OBJECTIVE = 2445.0
CASE2B_LP_G = np.array([[50.0, 55.0], [13.0, 17.0]])


def test_trivial_dispatch(trivial):
    sol = solve_dispatch(trivial)
    assert sol.g[0, 0] == pytest.approx(5.0, abs=1e-5)
    # Lagrangian adds dual * (g - d); the price is its negative
    assert sol.price[0, 0] == pytest.approx(1.0, abs=1e-5)
    assert sol.dual_balance[0, 0] == pytest.approx(-1.0, abs=1e-5)
    assert sol.kkt_residual_norm <= 1e-8


def test_case2b_matches_reference_lp(case2b, case2b_solution):
    sol = case2b_solution
    np.testing.assert_allclose(sol.g, CASE2B_LP_G, atol=1e-4)
    x_norm2 = sum(float(np.sum(getattr(sol, f) ** 2)) for f in ("g", "theta", "f", "p", "s"))
    assert abs(sol.objective_value - CASE2B_LP_OBJECTIVE) <= 0.5 * sol.reg_eps * x_norm2 + 1e-8
    assert solve_lp(case2b)[0] == pytest.approx(CASE2B_LP_OBJECTIVE, abs=1e-9)


def test_case2b_kkt_and_constraints(case2b, case2b_solution):
    sol = case2b_solution
    assert kkt_residual(case2b, sol) <= 1e-8
    net = case2b.network
    A = net.incidence().toarray()
    B = net.battery_incidence().toarray()
    bal = sol.g + B @ sol.p - case2b.demand - A @ sol.f
    assert np.abs(bal).max() <= 1e-8
    assert np.abs(sol.s[:, 1:] - sol.s[:, :-1] + sol.p).max() <= 1e-8
    np.testing.assert_allclose(sol.s[:, 0], net.s_init, atol=1e-8)
    np.testing.assert_allclose(sol.s[:, -1], net.s_final, atol=1e-8)
    for fam in ("g", "f", "p", "s"):
        assert np.all(sol.mult_lower[fam] >= 0) and np.all(sol.mult_upper[fam] >= 0)


def test_infeasible_demand(trivial):
    case = one_node_case(demand=11.0, g_max=10.0)
    with pytest.raises(InfeasibleError):
        solve_dispatch(case)


def test_infeasible_through_network():
    # enough capacity in total but the line cannot carry it
    case = generate_synthetic(2, 0, 1, 0, n_extra_lines=0)
    g_max = case.g_max.copy()
    g_max[1] = 0.0
    demand = case.demand.copy()
    demand[1] = case.network.f_max[0] + 5.0
    g_max[0] = demand.sum() * 2
    with pytest.raises(InfeasibleError):
        solve_dispatch(case.with_demand(demand).__class__(
            case.network, 1, case.cost, demand, g_max, case.emissions_rate))


def test_invalid_case_rejected(case2b):
    d = case2b.demand.copy()
    d[0, 0] = -3
    with pytest.raises(CaseValidationError):
        solve_dispatch(case2b.with_demand(d))


@pytest.mark.parametrize("kw", [{"reg_eps": 0.0}, {"tol": -1.0}])
def test_parameter_domain(trivial, kw):
    with pytest.raises(ValueError):
        solve_dispatch(trivial, **kw)


def test_kkt_residual_of_analytic_optimum(trivial):
    sol = solve_dispatch(trivial)
    eps = sol.reg_eps
    # g = 5 exactly, balance dual from stationarity 1 + eps*g + y = 0
    exact = dataclasses.replace(
        sol,
        g=np.array([[5.0]]),
        theta=np.zeros((1, 1)),
        dual_balance=np.array([[-(1.0 + eps * 5.0)]]),
        dual_ref=np.zeros(1),
        mult_lower={**sol.mult_lower, "g": np.zeros((1, 1))},
        mult_upper={**sol.mult_upper, "g": np.zeros((1, 1))},
    )
    assert kkt_residual(trivial, exact) <= 1e-12


def test_perturbed_solution_has_large_residual(case2b, case2b_solution):
    g = case2b_solution.g.copy()
    g[0, 0] += 1.0
    bad = dataclasses.replace(case2b_solution, g=g)
    assert kkt_residual(case2b, bad) >= 1.0 - case2b_solution.reg_eps


def test_duality_gap_small(case2b, case2b_solution, mid_case):
    assert abs(duality_gap(case2b, case2b_solution)) <= 1e-8
    case, sol = mid_case
    assert abs(duality_gap(case, sol)) <= 1e-6 * max(1.0, abs(sol.objective_value))


def test_complementarity(mid_case):
    case, sol = mid_case
    for fam in ("g", "f"):
        assert np.all(sol.mult_lower[fam] >= 0)
    assert sol.kkt_residual_norm <= 1e-8


def test_degenerate_detection(case2b, case2b_solution):
    sol = case2b_solution
    assert degenerate_constraints(case2b, sol).size == 0
    # line 1 sits at its limit in both periods; zero its multiplier by hand
    weak = dataclasses.replace(sol, mult_upper={**sol.mult_upper, "f": np.zeros((1, 2))})
    assert degenerate_constraints(case2b, weak).size == 2


@settings(max_examples=12, deadline=None)
@given(n=st.integers(2, 12), k=st.integers(0, 3), t=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_matches_reference_lp(n, k, t, seed):
    case = generate_synthetic(n, min(k, n), t, seed)
    sol = solve_dispatch(case)
    assert sol.kkt_residual_norm <= 1e-8
    lp_obj, _ = solve_lp(case)
    x_norm2 = sum(float(np.sum(getattr(sol, f) ** 2)) for f in ("g", "theta", "f", "p", "s"))
    assert lp_obj - 1e-6 <= sol.objective_value <= lp_obj + 0.5 * sol.reg_eps * x_norm2 + 1e-6
