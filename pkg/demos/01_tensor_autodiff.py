"""Tensor core tour: build a tiny computation, check gradients two ways.

Run:  python3 demos/01_tensor_autodiff.py
"""

import numpy as np

from pf3d import tensor as T
from pf3d.gradcheck import check_gradients
from pf3d.tensor import Tensor

rng = np.random.default_rng(0)

# ---------------------------------------------------------------------------
# forward pass records a graph; backward fills gradients
# ---------------------------------------------------------------------------
w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
x = Tensor(rng.standard_normal((5, 4)))
loss = T.tsum(T.square(T.gelu(T.matmul(x, w))))
T.backward(loss)
print(f"loss = {loss.item():.4f}")
print("analytic dL/dw[0, :] =", np.round(w.grad[0], 4))

# ---------------------------------------------------------------------------
# the finite-difference oracle agrees
# ---------------------------------------------------------------------------
w.zero_grad()
worst = check_gradients(
    lambda: T.tsum(T.square(T.gelu(T.matmul(x, w)))), [w]
)
print(f"worst relative error vs central differences: {worst:.2e}")

# ---------------------------------------------------------------------------
# guarded ops never create NaN/Inf from finite inputs
# ---------------------------------------------------------------------------
s = T.softmax(Tensor([[1000.0, 0.0, -1000.0]]), axis=-1)
print("softmax of huge logits:", s.data, "(finite, sums to 1)")
print("log at zero:", T.log(Tensor([0.0])).data, "(floored, finite)")
