"""
Trusting the numbers
====================

Every fast kernel is compared against a slow, independent reference, and
every backward against central finite differences.
"""
from gald.verification import (
    GRAD_OPS, conv_vs_oracle, ldv2_full_coverage_vs_oracle, nonlocal_vs_oracle, run_checks, run_gradcheck,
)

print("non-local head vs dense oracle:", max(nonlocal_vs_oracle(s) for s in range(5)))
print("LDv2 with a window covering the grid vs dense oracle:", max(ldv2_full_coverage_vs_oracle(s) for s in range(5)))
print("conv2d vs loop oracle, 50 random configs:", max(conv_vs_oracle(s) for s in range(50)))

# zero-padded keys leak probability mass to the border, so this one is expected to fail
for r in run_checks(["dense-equivalence"], n_seeds=3, border_mode="zero_pad_keys"):
    print(r.status, r.name, r.detail)

for op in GRAD_OPS:
    report = run_gradcheck(op, (1, 2, 4, 4), seed=0, tol=1e-5)
    print(f"{op:20s} max rel err {report.max_rel_error:.1e}  {'ok' if report.passed else 'FAIL'}")
