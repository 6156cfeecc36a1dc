"""Central finite-difference gradient oracle.

The analytic gradient comes from the production float32 path; the numeric
gradient re-evaluates the same graph builder on float64 copies with +/-eps
perturbations.  The oracle never touches the backward machinery it checks.
"""

import numpy as np

from ctharm import tensor as T

EPS = 1e-3
REL_TOL = 1e-2
ABS_TOL = 1e-4


def analytic_grads(build, arrays):
    """Run the float32 production path; return per-input gradients."""
    tensors = [T.Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    loss = build(tensors)
    T.backward(loss)
    return [t.grad.astype(np.float64) if t.grad is not None else np.zeros_like(a)
            for t, a in zip(tensors, arrays)]


def numeric_grads(build, arrays, eps=EPS):
    """Central differences of the float64 forward, element by element."""
    def loss_value(mod):
        tensors = [T.Tensor(a.astype(np.float64)) for a in mod]
        return float(build(tensors).data.reshape(()))

    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros(a.shape, dtype=np.float64)
        flat = g.reshape(-1)
        base = [arr.astype(np.float64).copy() for arr in arrays]
        for j in range(a.size):
            orig = base[i].reshape(-1)[j]
            base[i].reshape(-1)[j] = orig + eps
            up = loss_value(base)
            base[i].reshape(-1)[j] = orig - eps
            down = loss_value(base)
            base[i].reshape(-1)[j] = orig
            flat[j] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def assert_grads_close(build, arrays, rel=REL_TOL, abs_tol=ABS_TOL):
    """Per element, |analytic - numeric| <= max(rel*|numeric|, abs_tol)."""
    ana = analytic_grads(build, arrays)
    num = numeric_grads(build, arrays)
    for i, (a, n) in enumerate(zip(ana, num)):
        err = np.abs(a - n)
        bound = np.maximum(rel * np.abs(n), abs_tol)
        worst = (err - bound).max()
        assert np.all(err <= bound), (
            f"input {i}: max violation {worst:.3e}; analytic {a.ravel()[:5]}, "
            f"numeric {n.ravel()[:5]}")
