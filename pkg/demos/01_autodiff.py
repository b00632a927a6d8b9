"""
Reverse-mode gradients on small arrays
======================================

Every model in the package is built from a handful of differentiable
operations on 2-D float64 arrays. Here we build a two-layer network by hand
and compare its gradient against central differences.
"""

import numpy as np

from hybridsdm import tensor as T

rng = np.random.default_rng(0)
x = rng.normal(size=(6, 3))
W1 = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="W1")
b1 = T.Tensor(np.zeros((1, 4)), requires_grad=True, name="b1")
W2 = T.Tensor(rng.normal(size=(4, 1)), requires_grad=True, name="W2")


def forward():
    h = T.relu(T.linear(x, W1, b1))
    return T.mean_all(T.sigmoid(T.matmul(h, W2)))


loss = forward()
T.backward(loss)
print("loss", loss.item())

# central differences on every entry of W1
h = 1e-6
numeric = np.zeros_like(W1.values)
for idx in np.ndindex(W1.values.shape):
    orig = W1.values[idx]
    W1.values[idx] = orig + h
    up = forward().item()
    W1.values[idx] = orig - h
    down = forward().item()
    W1.values[idx] = orig
    numeric[idx] = (up - down) / (2 * h)

print("max |analytic - numeric|:", np.abs(W1.grad - numeric).max())

# inside no_grad nothing is recorded, which is what predict() uses
with T.no_grad():
    print("graph recorded:", forward().requires_grad)
