"""Shared numerical helpers for the test suite."""

import numpy as np

from sideshap.autodiff import Tensor


def fd_gradient(build_loss, values, eps=1e-6):
    """Central finite differences of a scalar loss w.r.t. a list of arrays.

    ``build_loss(tensors)`` must construct the graph from scratch and return
    the scalar loss Tensor. Arrays are used in float64 so the truncation error
    of the stencil dominates.
    """
    values = [np.asarray(v, dtype=np.float64) for v in values]

    def run(vs):
        tensors = [Tensor(v, requires_grad=True, dtype=np.float64) for v in vs]
        return build_loss(tensors), tensors

    grads = []
    for i, v in enumerate(values):
        g = np.zeros_like(v)
        flat = v.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            bumped = [u.copy() for u in values]
            bumped[i].reshape(-1)[j] = flat[j] + eps
            hi, _ = run(bumped)
            bumped[i].reshape(-1)[j] = flat[j] - eps
            lo, _ = run(bumped)
            gflat[j] = (hi.item() - lo.item()) / (2 * eps)
        grads.append(g)
    return grads


def backward_gradient(build_loss, values):
    tensors = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True,
                      dtype=np.float64) for v in values]
    loss = build_loss(tensors)
    loss.backward()
    return [t.grad for t in tensors]


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
