# coding: utf-8

# # Checking against finite differences
#
# The oracle re-solves the dispatch at d +- h for every entry. Where an
# active set changes between the two, the one-sided slopes differ and the
# entry is flagged and left out of comparisons.

from gridsens.central import lme_reverse_central
from gridsens.dispatch import solve_dispatch
from gridsens.model import generate_synthetic
from gridsens.oracle import compare_lme, lme_finite_difference

case = generate_synthetic(10, 2, 12, seed=5)
sol = solve_dispatch(case)

fd = lme_finite_difference(case, solution=sol)
rev = lme_reverse_central(case, sol)
print(compare_lme(rev, fd))
print("flagged entries", int(fd.degenerate_mask.sum()), "of", fd.lam.size)

# A step large enough to cross a limit shows the flagging at work.

coarse = lme_finite_difference(case, step=0.3, solution=sol)
print("step 0.3:", compare_lme(rev, coarse), "flagged", int(coarse.degenerate_mask.sum()))
