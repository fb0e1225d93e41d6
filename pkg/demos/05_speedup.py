# coding: utf-8

# # Speedup model and a small benchmark
#
# Serial decentralization costs about the same as the centralized solve
# when factorization is linear in size (beta = 1). Running the periods in
# parallel caps the gain at (n_bar / K + 1) ** beta.

import os

from gridsens.bench import BenchConfig, fit_beta, run_benchmark, speedup_model

for T in (1, 10, 100, 1000, 10**6):
    print(T, speedup_model(T, 600, 10, 1.0, parallel=False),
          round(speedup_model(T, 600, 10, 1.0, parallel=True), 2))

# Measured times cover factorizations and triangular solves only. On a
# single core parallelism cannot help, so compare against os.cpu_count().

print("cpus", os.cpu_count())
report = run_benchmark(BenchConfig(horizons=[12, 24, 48], methods=["decentral_rev"],
                                   parallelism=[1, 4], trials=3, n_nodes=20))
for c in report.cells:
    print(f"{c.method:14s} T={c.T:3d} p={c.parallelism} {c.trial_min_seconds:.4f}s speedup={c.speedup}")
print("fitted beta", round(fit_beta(report), 2))
