"""Central finite-difference gradient checking used across the test suite.

The oracle is independent of the backward pass: it perturbs every input and
parameter element by +-h and compares the resulting loss slope against the
analytic gradient.
"""

import numpy as np

from steerdiff import autodiff as ad
from steerdiff.autodiff import Tensor

FD_STEP = 1e-4
REL_TOL = 1e-4
ABS_FLOOR = 1e-7


def numeric_grad(f, tensors, h=FD_STEP):
    """d f / d t for each tensor via central differences, in float64."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with ad.no_grad():
                up = float(f().data)
            flat[i] = orig - h
            with ad.no_grad():
                down = float(f().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(f, tensors, h=FD_STEP, rel_tol=REL_TOL, abs_floor=ABS_FLOOR):
    """Assert analytic gradients of scalar f() match finite differences.

    Tensors must be float64 leaves with requires_grad=True. Per element, pass
    requires |analytic - numeric| <= rel_tol * max(|analytic|, |numeric|) + abs_floor.
    Returns the worst relative error seen.
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "gradient checks run in 64-bit mode"
        t.grad = None
    loss = f()
    ad.backward(loss)
    numeric = numeric_grad(f, tensors, h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        assert t.grad is not None, "parameter received no gradient"
        ana = t.grad.astype(np.float64)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), abs_floor / rel_tol)
        rel = np.abs(ana - num) / denom
        worst = max(worst, float(rel.max()))
        if not np.all(np.abs(ana - num) <= rel_tol * np.maximum(np.abs(ana), np.abs(num)) + abs_floor):
            idx = np.unravel_index(np.argmax(rel), rel.shape)
            raise AssertionError(
                f"gradient mismatch at {idx}: analytic={ana[idx]:.8g} numeric={num[idx]:.8g} "
                f"(rel err {rel[idx]:.3g}, shape {t.data.shape})")
    return worst


def tensor64(rng, shape, scale=1.0, requires_grad=True):
    return Tensor((rng.standard_normal(shape) * scale), requires_grad=requires_grad,
                  dtype=np.float64)
