# coding: utf-8

# # Period blocks and the coupling system
#
# With the state update written as s_t - p_t - s_{t+1} = 0, its duals are
# the coupling variables nu. Each period block sees nu on its parameter
# side; the T*K by T*K coupling matrix C is block tridiagonal.

import numpy as np

from gridsens.decentral import (
    assemble_coupling,
    build_local_blocks,
    extract_coupling_duals,
    nu_jacobian,
    solve_local,
)
from gridsens.dispatch import solve_dispatch
from gridsens.model import generate_synthetic

case = generate_synthetic(12, 2, 8, seed=3)
sol = solve_dispatch(case)
nu = extract_coupling_duals(sol)
print("nu\n", np.round(nu.nu, 4))

# Fixing nu and solving each period alone recovers the joint optimum.

for t in (0, 4, 7):
    loc = solve_local(case, t, nu)
    print(t, np.abs(loc["g"] - sol.g[:, t]).max())

blocks = build_local_blocks(case, sol)
print("block sizes", [b.dim for b in blocks])
C, _ = assemble_coupling(blocks)
dense = C.to_dense()
print("C", dense.shape, "top-left corner\n", np.round(dense[:6, :6], 1))

# The demand sensitivity of nu, used by the forward decentralized mode.

D = nu_jacobian(case, sol)
print("Dnu shape", D.shape, "largest entry", np.abs(D).max())
