"""
Reverse-mode autodiff on a small network
========================================

Build a two-layer perceptron from Tensor ops, backpropagate a
cross-entropy loss, then compare the gradients with central differences.
"""

import numpy as np

from pyramid_transformer import Tensor, grad_check
from pyramid_transformer.ops import cross_entropy, gelu

rng = np.random.default_rng(0)

# float64 everywhere so the finite differences are trustworthy
x = Tensor(rng.standard_normal((5, 3)))
w1 = Tensor(rng.standard_normal((3, 8)) * 0.5, requires_grad=True)
w2 = Tensor(rng.standard_normal((8, 4)) * 0.5, requires_grad=True)
labels = np.array([0, 1, 2, 3, 1])


def loss_fn():
    return cross_entropy(gelu(x @ w1) @ w2, labels, axis=-1)


loss = loss_fn()
loss.backward()
print("loss", loss.item())
print("dL/dw2 row 0:", np.round(w2.grad[0], 4))

# grad_check rebuilds the graph, perturbs every entry of one input and reports the worst relative error
for name, w in (("w1", w1), ("w2", w2)):
    print(f"{name}: max relative error vs central differences {grad_check(loss_fn, w):.2e}")
