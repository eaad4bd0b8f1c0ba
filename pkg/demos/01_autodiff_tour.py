"""
A tour of the autodiff engine
=============================

Build a tiny convolutional network from the primitives, run it forward,
differentiate it, and confirm the gradients against finite differences.
"""

import numpy as np

from bsnet.autodiff import Parameter, grad_check, set_numeric_mode
from bsnet.autodiff import functional as F

# gradient checks need 64-bit arithmetic
set_numeric_mode("float64")
rng = np.random.default_rng(0)

###############################################################################
# A conv -> batchnorm -> ReLU -> maxpool block on a batch of two 6x6 images.

x = rng.normal(size=(2, 3, 6, 6))
w = Parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3)
b = Parameter(np.zeros(4))
gamma, beta = Parameter(np.ones(4)), Parameter(np.zeros(4))
running_mean, running_var = np.zeros(4), np.ones(4)


def block():
    h = F.conv2d(x, w, b, padding=1)
    h = F.batchnorm2d(h, gamma, beta, running_mean.copy(), running_var.copy(), True)
    return F.maxpool2d(F.relu(h), 2)


out = block()
print("output shape:", out.shape)

###############################################################################
# Reverse mode: one backward pass fills ``.grad`` on every leaf.

loss = (out * out).sum()
loss.backward()
print("d loss / d w has shape", w.grad.shape, "and norm", np.linalg.norm(w.grad))

###############################################################################
# Central differences agree with the analytic gradients.

report = grad_check(lambda: (block() ** 2).sum(), [w, b, gamma, beta])
print(f"checked {report.checked} coordinates, max relative error {report.max_error:.2e}")
