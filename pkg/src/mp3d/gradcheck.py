"""Central finite-difference gradient verification.

Used by the test suite at 32-bit (loose tolerance) and in a 64-bit shadow
mode of the same op implementations (tight tolerance). The numerical side
is an independent oracle: it only calls the forward pass.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numerical_gradient(fn, inputs, wrt, step):
    """Central-difference gradient of scalar fn w.r.t. inputs[wrt].

    fn receives the list of Tensors and returns a scalar Tensor. Only the
    forward pass is used.
    """
    target = inputs[wrt]
    grad = np.zeros_like(target.data)
    flat = target.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(inputs).item()
        flat[i] = orig - step
        lo = fn(inputs).item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(fn, inputs, step=None, wrt=None):
    """Compare analytic and numerical gradients; returns max relative error.

    Relative error is max|a - n| normalized by the largest gradient
    magnitude seen (floored to avoid zero division).
    """
    dtype = inputs[0].dtype
    if step is None:
        step = 1e-3 if dtype == np.float32 else 1e-6
    for t in inputs:
        t.grad = None
    loss = fn(inputs)
    loss.backward()
    if wrt is None:
        wrt = [i for i, t in enumerate(inputs) if t.requires_grad]
    worst = 0.0
    for i in wrt:
        analytic = inputs[i].grad
        if analytic is None:
            analytic = np.zeros_like(inputs[i].data)
        numeric = numerical_gradient(fn, inputs, i, step)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return worst


def random_tensor(rng, shape, dtype=np.float32, requires_grad=True, scale=1.0):
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=requires_grad)
