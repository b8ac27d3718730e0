"""Tour of the tensor engine: build a tiny computation, differentiate it,
and validate every gradient against finite differences.

Run:  python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from gair.tensor import Tensor, backward, grad_check, l2_normalize_rows, matmul, softmax_rows

rng = np.random.default_rng(0)

# A Tensor wraps a dense numpy array and remembers how it was computed.
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)

# Forward: a little network ending in a scalar.
h = matmul(x, w).gelu()
p = softmax_rows(h)
loss = (p * p).sum()
print("loss =", float(loss.values))

# Reverse-mode sweep: every requires_grad leaf receives d loss / d leaf.
backward(loss)
print("dloss/dw:\n", w.grad)

# The same machinery audited against central differences. grad_check
# perturbs each input component by h = 1e-6 * max(1, |x|) and compares.
report = grad_check(
    lambda a, b: (softmax_rows(matmul(a, b).gelu()) * l2_normalize_rows(matmul(a, b))).sum(),
    [Tensor(rng.normal(size=(4, 3)), requires_grad=True),
     Tensor(rng.normal(size=(3, 2)), requires_grad=True)],
    tolerance=1e-4,
)
print(f"grad check: max relative error {report.max_relative_error:.2e} "
      f"(tolerance {report.tolerance:.0e}) -> {'pass' if report.passed else 'FAIL'}")

# The full per-operation audit that `gair gradcheck` runs:
from gair.gradaudit import run_audit

for r in run_audit(tolerance=1e-4):
    print(f"  {r.op_name:<24} {r.max_relative_error:.2e}  {'pass' if r.passed else 'FAIL'}")
