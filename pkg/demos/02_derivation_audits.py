"""Run the exact linear-Gaussian audits and inspect the forward-definition gap.

Every closed-form expression in the library is checked against an
independent oracle: a compounding recursion, generic one-dimensional
Gaussian conditioning, exact push-forwards of the sampler updates, and
central finite differences for the denoiser gradients.

The most interesting audit quantifies a real discrepancy: compounding the
single-step forward transition does NOT reproduce the closed-form marginal's
condition coefficient (the residual coefficient and the variance do match).
The library standardizes on the closed-form marginal; the single-step form
is kept for exactly this comparison.
"""

import json

import numpy as np

from residiff import build_linear_schedule
from residiff.audit import run_audits
from residiff.oracle import compound_marginal_coeffs

report = run_audits(seed=0)
for audit in report["audits"]:
    flag = "ok " if audit["pass"] else "FAIL"
    print(f"[{flag}] {audit['name']:42s} residual {audit['residual']:.2e}"
          f"  (tol {audit['tolerance']:.0e})")
print("all audits pass:", report["all_pass"])

print("\ncondition-coefficient gap, single-step chain vs closed-form marginal:")
sched = build_linear_schedule(5, 0.1, 0.3)
print("  t   compounded   closed-form   gap")
for t in range(1, 6):
    state = compound_marginal_coeffs(sched, t)
    closed = float(np.sqrt(sched.alpha_cum[t]))
    print(f"  {t}   {state.coef_condition:.6f}     {closed:.6f}      "
          f"{state.coef_condition - closed:+.6f}")

print("\nfull JSON report structure:",
      json.dumps({k: type(v).__name__ for k, v in report.items()}, indent=2))
