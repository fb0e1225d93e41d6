# coding: utf-8

# # Locational marginal emissions, four ways
#
# The LME at node n and period t is the change in total emissions per MW of
# extra demand there. Both centralized modes work on the full KKT system;
# the decentralized modes split it into one block per period tied together
# by the battery state duals.

import time

import numpy as np

from gridsens.central import lme_forward_central, lme_reverse_central
from gridsens.decentral import lme_forward_decentral, lme_reverse_decentral
from gridsens.dispatch import solve_dispatch
from gridsens.kkt import assemble_kkt
from gridsens.model import generate_synthetic

case = generate_synthetic(30, 3, 24, seed=7)
sol = solve_dispatch(case)
kkt = assemble_kkt(case, sol)
print("KKT dimension", kkt.dim_l)

results = {}
for fn in (lme_forward_central, lme_reverse_central, lme_forward_decentral, lme_reverse_decentral):
    t0 = time.perf_counter()
    res = fn(case, sol, kkt=kkt)
    results[res.method.value] = res
    print(f"{res.method.value:14s} {time.perf_counter() - t0:7.3f}s  "
          f"linear algebra {res.linear_solve_time:7.3f}s  {res.counters}")

# All four agree to rounding.

ref = results["central_rev"].lam
for name, res in results.items():
    print(name, np.abs(res.lam - ref).max())

# Most entries equal the rate of a marginal unit; congestion and storage
# mix several units and produce the in-between values.

print(np.round(ref[:5, :6], 3))
