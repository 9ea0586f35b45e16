"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a small expression, run the reverse pass and compare it with
central finite differences.
"""

import numpy as np

from cagul_lab import autodiff as ad
from cagul_lab.autodiff import Tensor

# %%
# Leaves that require gradients are the parameters; everything else is a constant.
rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="w")
x = Tensor(rng.normal(size=(5, 4)))
targets = np.array([0, 2, 1, 1, 0])

# %%
# A linear classifier with a softmax cross-entropy loss.
def loss_fn():
    return ad.cross_entropy(ad.matmul(x, w), targets)

loss = loss_fn()
ad.backward(loss)
print("loss", float(loss.data))
print("dL/dw\n", w.grad)

# %%
# grad_check reruns the program in float64 and perturbs a few sampled
# coordinates. It returns the worst relative error.
w.grad = None
print("max relative error", ad.grad_check(loss_fn, [w], eps=1e-5, n_samples=8, rng=rng))

# %%
# A few Adam steps drive the loss down.
opt = ad.Adam([w], lr=0.1)
for step in range(50):
    opt.zero_grad()
    loss = loss_fn()
    ad.backward(loss)
    opt.step()
print("after 50 steps", float(loss.data))
