"""A tour of the tensor engine: forward ops, gradients, and the
second-order differentiation that powers the gradient penalty.

Run: python demos/01_autodiff_engine.py
"""

import numpy as np

from polypsynth import tensor as T

# --- basic reverse-mode gradients ------------------------------------
x = T.tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = T.tensor_sum(T.mul(x, x))
grad = T.backward(loss, x)
print("d/dx sum(x^2) at [1,2,3]:", grad.numpy())  # [2, 4, 6]

# --- convolution and its adjoint -------------------------------------
rng = np.random.default_rng(0)
img = T.tensor(rng.normal(size=(1, 1, 5, 5)))
kernel = T.tensor(np.ones((1, 1, 2, 2)))
out = T.conv2d(img, kernel, stride=1, pad=0)
print("conv2d output shape:", out.shape)

# <conv(a), b> == <a, conv_transpose(b)> with the same kernel
b = T.tensor(rng.normal(size=out.shape))
lhs = float((out.numpy() * b.numpy()).sum())
rhs = float((img.numpy() * T.conv_transpose2d(b, kernel, 1, 0).numpy()).sum())
print(f"adjoint identity gap: {abs(lhs - rhs):.2e}")

# --- gradients that are themselves differentiable ---------------------
# f(x) = sum(conv(x, K)^2); then r = ||df/dx||^2 is a function of K and
# can be differentiated again: exactly the structure of a gradient
# penalty on a critic.
x = T.tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
K = T.tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
f = T.tensor_sum(T.mul(y := T.conv2d(x, K, 1, 0), y))
gx = T.backward(f, x, create_graph=True)  # differentiable gradient
r = T.tensor_sum(T.mul(gx, gx))
gK = T.backward(r, K)
print("d/dK of ||df/dx||^2 has shape:", gK.shape)

# --- Adam on a toy quadratic ------------------------------------------
from polypsynth.optim import ParamSet, adam_step

params = ParamSet()
w = params.add("w", np.array([5.0]))
for step in range(200):
    loss = T.tensor_sum(T.mul(w, w))
    grads = T.backward(loss, params)
    adam_step(params, grads, lr=0.1)
print("w after 200 Adam steps on w^2:", float(w.numpy()[0]))
