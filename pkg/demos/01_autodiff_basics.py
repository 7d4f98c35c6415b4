"""A tour of the autodiff engine: build a graph, backprop, verify with
finite differences.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from stlab import autograd as ag
from stlab.autograd import Tensor
from stlab.gradcheck import check_gradients

rng = np.random.default_rng(0)

# A two-layer MLP on a toy regression problem, written directly against
# the primitives.
x = Tensor(rng.normal(size=(8, 4)))
y = rng.normal(size=(8, 2))

w1 = Tensor(rng.normal(scale=0.5, size=(4, 16)), requires_grad=True)
b1 = Tensor(np.zeros(16), requires_grad=True)
w2 = Tensor(rng.normal(scale=0.5, size=(16, 2)), requires_grad=True)
b2 = Tensor(np.zeros(2), requires_grad=True)
params = [w1, b1, w2, b2]


def forward():
    h = ag.relu(ag.matmul(x, w1) + b1)
    pred = ag.matmul(h, w2) + b2
    diff = pred - Tensor(y)
    return (diff * diff).mean()


loss = forward()
loss.backward()
print(f"loss = {loss.item():.6f}")
print(f"||dL/dw1|| = {np.linalg.norm(w1.grad):.6f}")
print(f"||dL/dw2|| = {np.linalg.norm(w2.grad):.6f}")

# The same graph checked entry-by-entry against central differences.
for p in params:
    p.grad = None
n = check_gradients(forward, params, rel_tol=1e-5, step=1e-6)
print(f"finite differences agree on all {n} parameter entries")

# Graphs are one-shot: a second backward on the same nodes is an error.
try:
    loss.backward()
except RuntimeError as exc:
    print(f"second backward correctly rejected: {exc}")
