"""Tour of the tensor core: taped ops, backward, and the FD oracle.

Run:  python demos/01_autograd_and_gradients.py
"""

import numpy as np

from tapernorm import Tape, Tensor, grad_check
from tapernorm.tensor import matmul, silu, softmax_rows

print("=" * 64)
print("  reverse-mode autodiff on a recording tape")
print("=" * 64)

x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32), requires_grad=True)
w = Tensor(np.array([[0.5], [-1.0]], dtype=np.float32), requires_grad=True)

with Tape() as tape:
    y = matmul(x, w)          # [[-1.5], [-2.5]]
    loss = (y * y).sum()
    tape.backward(loss)

print(f"y            = {y.data.ravel()}")
print(f"loss         = {loss.item():.4f}")
print(f"dloss/dx     =\n{x.grad}")
print(f"dloss/dw     =\n{w.grad}")

print()
print("finite-difference oracle (max relative error vs autodiff):")
rng = np.random.default_rng(0)

cases = {
    "matmul": lambda: grad_check(
        lambda a: matmul(a, Tensor(rng.uniform(0.3, 0.6, (3, 2)).astype(np.float32))).sum(),
        Tensor(rng.uniform(0.3, 0.6, (2, 3)).astype(np.float32)),
    ),
    "silu": lambda: grad_check(
        lambda a: silu(a).sum(), Tensor(rng.uniform(0.8, 1.5, 6).astype(np.float32))
    ),
    "softmax": lambda: grad_check(
        lambda a: (softmax_rows(a) * Tensor(np.array([[0.5, 0.5, 6.0]], np.float32))).sum(),
        Tensor(rng.uniform(-0.2, 0.2, (1, 3)).astype(np.float32)),
    ),
}
for name, run in cases.items():
    print(f"  {name:8s} {run():.2e}")

print()
print("softmax rows sum to one and are shift invariant:")
z = rng.standard_normal((2, 5)).astype(np.float32)
p = softmax_rows(Tensor(z)).data
p_shift = softmax_rows(Tensor(z + 10.0)).data
print(f"  row sums         : {p.sum(axis=-1)}")
print(f"  max shift effect : {np.abs(p - p_shift).max():.2e}")
