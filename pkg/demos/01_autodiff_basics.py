"""Tour of the tensor engine: build a small computation, differentiate it,
and cross-check the gradients with central finite differences."""

import numpy as np

from protonorm import Tensor, relu, softmax

rng = np.random.default_rng(0)

# A two-layer toy network with a softmax readout, all in float64.
x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w1 = Tensor(rng.normal(size=(3, 5)) / np.sqrt(3), requires_grad=True)
w2 = Tensor(rng.normal(size=(5, 2)) / np.sqrt(5), requires_grad=True)

logits = relu(x @ w1) @ w2
probs = softmax(logits, axis=1)
loss = (probs * probs).sum()
loss.backward()

print("loss:", loss.item())
print("grad shapes:", x.grad.shape, w1.grad.shape, w2.grad.shape)

# Finite-difference spot check on w2.
eps = 1e-5


def loss_at(w2_data):
    h = np.maximum(x.data @ w1.data, 0.0) @ w2_data
    e = np.exp(h - h.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return float((p * p).sum())


numeric = np.zeros_like(w2.data)
for i in range(w2.data.shape[0]):
    for j in range(w2.data.shape[1]):
        w2.data[i, j] += eps
        up = loss_at(w2.data)
        w2.data[i, j] -= 2 * eps
        down = loss_at(w2.data)
        w2.data[i, j] += eps
        numeric[i, j] = (up - down) / (2 * eps)

gap = np.abs(w2.grad - numeric).max()
print(f"max |analytic - numeric| on w2: {gap:.3e}")
assert gap < 1e-8

# A consumed graph refuses a second backward pass.
try:
    loss.backward()
except Exception as e:
    print("second backward correctly rejected:", type(e).__name__)
