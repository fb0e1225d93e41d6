import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridsens.central import lme_forward_central, lme_reverse_central
from gridsens.dispatch import solve_dispatch
from gridsens.kkt import assemble_kkt
from gridsens.model import generate_synthetic
from gridsens.oracle import Method, compare_lme, lme_finite_difference

from conftest import one_node_case

# case2b: the line runs at its 30 MW limit in both periods, so each node's
# own unit is marginal and the LMEs equal the local emission rates
CASE2B_LME = np.array([[0.9, 0.95], [0.3, 0.35]])
METHODS = [lme_forward_central, lme_reverse_central]


@pytest.mark.parametrize("fn", METHODS)
def test_trivial_rate(trivial, fn):
    res = fn(trivial, solve_dispatch(trivial))
    assert res.lam.shape == (1, 1)
    assert abs(res.lam[0, 0] - 2.0) <= 10 * 1e-6


@pytest.mark.parametrize("fn", METHODS)
def test_zero_rate_gives_zero(fn):
    case = one_node_case(rate=0.0)
    res = fn(case, solve_dispatch(case))
    assert np.all(res.lam == 0.0)


@pytest.mark.parametrize("fn", METHODS)
def test_case2b_values(case2b, case2b_solution, fn):
    res = fn(case2b, case2b_solution)
    np.testing.assert_allclose(res.lam, CASE2B_LME, atol=1e-6)


def test_case2b_matches_fd(case2b, case2b_solution):
    fd = lme_finite_difference(case2b, solution=case2b_solution)
    rep = compare_lme(lme_reverse_central(case2b, case2b_solution), fd)
    assert rep.compared == 4
    assert rep.max_rel_diff < 1e-3


@settings(max_examples=15, deadline=None)
@given(N=st.integers(2, 12), K=st.integers(0, 3), T=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_forward_equals_reverse(N, K, T, seed):
    case = generate_synthetic(N, min(K, N), T, seed)
    sol = solve_dispatch(case)
    kkt = assemble_kkt(case, sol)
    fwd = lme_forward_central(case, sol, kkt=kkt)
    rev = lme_reverse_central(case, sol, kkt=kkt)
    scale = 1.0 + np.abs(rev.lam).max()
    assert np.abs(fwd.lam - rev.lam).max() <= 1e-8 * scale


def test_reverse_counters(mid_case):
    case, sol = mid_case
    res = lme_reverse_central(case, sol)
    assert res.method is Method.CENTRAL_REV
    assert res.counters["factorizations"] == 1
    assert res.counters["adjoint_solves"] == 1
    assert res.counters["forward_solves"] == 0
    assert res.counters["max_rhs_columns"] == 1


def test_forward_counters(mid_case):
    case, sol = mid_case
    res = lme_forward_central(case, sol)
    N, T = case.demand.shape
    assert res.counters["factorizations"] == 1
    assert res.counters["forward_solves"] == N * T
    assert res.counters["adjoint_solves"] == 0


def test_timings_are_split(mid_case):
    case, sol = mid_case
    res = lme_forward_central(case, sol)
    assert {"solve:factorize", "solve:forward", "assemble"} <= set(res.timings)
    assert res.linear_solve_time == pytest.approx(
        res.timings["solve:factorize"] + res.timings["solve:forward"]
    )


@pytest.mark.parametrize("fn", METHODS)
def test_parallelism_is_bitwise_deterministic(mid_case, fn):
    case, sol = mid_case
    ref = fn(case, sol, parallelism=1).lam
    for par in (2, 8):
        assert np.array_equal(fn(case, sol, parallelism=par).lam, ref)


def test_linear_in_emission_rates(mid_case):
    case, sol = mid_case
    rng = np.random.default_rng(1)
    e2 = rng.uniform(0, 1, size=case.emissions_rate.shape)
    kkt = assemble_kkt(case, sol)
    a = lme_reverse_central(case, sol, kkt=kkt).lam
    b = lme_reverse_central(case.with_emissions(e2), sol, kkt=kkt).lam
    ab = lme_reverse_central(case.with_emissions(2 * case.emissions_rate + 3 * e2), sol, kkt=kkt).lam
    np.testing.assert_allclose(ab, 2 * a + 3 * b, atol=1e-10)


def test_cost_as_rate_recovers_price(mid_case):
    # with e := c the "emissions" are the generation cost, whose demand
    # gradient is the nodal price read off the balance duals
    case, sol = mid_case
    res = lme_reverse_central(case.with_emissions(case.cost), sol)
    scale = np.abs(sol.price).max()
    assert np.abs(res.lam - sol.price).max() <= 1e-4 * scale
