"""A tour of the autodiff engine: tensors, tapes, and gradient checking.

Every layer in the model is built from the handful of primitives shown
here.  Run it to watch a tiny computation get differentiated both ways.
"""

import numpy as np

from ecgfusion import autodiff as ad
from ecgfusion.autodiff import Tape, Tensor, backward, finite_diff_check

# A tensor is just a float64 array plus an optional gradient slot.
w = Tensor(np.array([[0.4, -0.3], [0.8, 0.1]]), requires_grad=True)
x = Tensor(np.array([[1.0, 2.0]]))
print("w =\n", w.data)

# Recording happens only inside a Tape context; inference costs nothing.
with Tape() as tape:
    h = ad.matmul(x, w)
    p = ad.softmax_rows(h)
    loss = ad.sum_all(ad.mul(p, p))  # a scalar to differentiate
print(f"forward: p = {p.data.round(4)}, loss = {loss.item():.6f}")
print(f"tape recorded {len(tape)} operations")

backward(loss, tape)
print("dL/dw =\n", w.grad)

# Gradients accumulate: a second backward pass doubles every gradient.
backward(loss, tape)
print("after a second backward, dL/dw doubled:\n", w.grad)

# Central finite differences validate every gradient rule.
def f(t):
    return ad.sum_all(ad.mul(ad.softmax_rows(ad.matmul(x, t)), ad.softmax_rows(ad.matmul(x, t))))

err = finite_diff_check(f, w, h=1e-5)
print(f"finite-difference check: max relative error {err:.2e}")

# The same machinery drives attention, convolution, pooling, dropout,
# layer norm, and the classification loss; see the package tests for the
# per-operation oracles.
