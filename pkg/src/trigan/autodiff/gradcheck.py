"""Central finite-difference gradient checking."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn, inputs, h=1e-5):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. each input's data."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    backward(fn(*inputs))
    return [t.grad.copy() for t in inputs]


def relative_error(a, b, floor=1e-7):
    """``||a - b|| / max(||a||, ||b||, floor)``.

    The floor keeps exactly-zero gradients from turning finite-difference
    round-off (~1e-11) into a relative error of order one.
    """
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return num / den


def gradcheck(fn, inputs, h=1e-5):
    """Largest relative error between analytic and numerical gradients.

    ``fn`` maps the ``inputs`` tensors to a scalar tensor. Non-scalar outputs
    should be contracted with a fixed random weight by the caller.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    ana = analytic_grad(fn, inputs)
    num = numerical_grad(fn, inputs, h)
    return max(relative_error(a, n) for a, n in zip(ana, num))
