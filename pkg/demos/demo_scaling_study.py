"""Desk-scale estimation-error scaling: error vs sample size.

Runs a reduced version of the sample-size setting (fewer replications and
grid points than the full study) and fits the log-log rate; squared error
should fall like 1/T.  The full three-setting study behind the acceptance
suite uses 20 replications and all three noise kinds.
"""

import numpy as np

from htar import StudySpec, fit_rate_slope, run_scaling_study
from htar.als import FitConfig

spec = StudySpec(
    kind="scaling-c",
    replications=4,
    seed=0,
    noise_kinds=("iid_gaussian",),
    grid=(600, 1000, 1700, 2500),
    fit_config=FitConfig(max_sweeps=100, rel_loss_tol=1e-5, restarts=2,
                         probe_sweeps=6, init="spectral", accelerate=True),
)
print("running 4 replications x 4 sample sizes (a minute or two)...\n")
result = run_scaling_study(spec)

print("mean estimation error by sample size:")
for setting, noise, t_len, mean, stderr in result.aggregated():
    print(f"  T = {t_len:4d}: {mean:.4f} +- {stderr:.4f}")

slope, r2 = fit_rate_slope(result, noise="iid_gaussian")
print(f"\nlog-log slope of mean squared error vs T: {slope:.3f} "
      f"(r^2 = {r2:.3f}; theory: -1)")
