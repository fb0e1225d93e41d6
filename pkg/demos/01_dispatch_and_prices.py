# coding: utf-8

# # Dispatch and nodal prices
#
# A two-node, two-period case ships with the package. Node 1 has a cheap,
# dirty generator; node 2 has an expensive, cleaner one and a battery. The
# single line between them is limited to 30 MW.

import numpy as np

from gridsens.dispatch import duality_gap, solve_dispatch
from gridsens.model import load_bundled_case

case = load_bundled_case("case2b")
sol = solve_dispatch(case)

print("generation [MW]\n", np.round(sol.g, 3))
print("line flow [MW]\n", np.round(sol.f, 3))
print("state of charge [MWh]\n", np.round(sol.s, 3))

# The line runs at its limit, so the two nodes see different prices. The
# balance duals carry the opposite sign of the price.

print("price [$/MWh]\n", np.round(sol.price, 3))
print("duality gap", duality_gap(case, sol))
