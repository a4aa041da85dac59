"""Shared test utilities: a central finite-difference oracle and tiny models."""

import numpy as np

from kdlvision import tensor as T
from kdlvision.dataset import Batch

STEP = 1e-5
TOL = 1e-6


def numeric_grad(fn, arr, step=STEP):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = fn()
        flat[i] = old - step
        lo = fn()
        flat[i] = old
        out.reshape(-1)[i] = (hi - lo) / (2 * step)
    return out


def grad_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)))) if numeric.size else 0.0


def check_grads(loss_fn, tensors):
    """Return the worst relative error over ``tensors`` for scalar ``loss_fn()``."""
    for t in tensors:
        t.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        numeric = numeric_grad(lambda: float(loss_fn().item()), t.data)
        worst = max(worst, grad_error(analytic, numeric))
    return worst


class ConstantModel:
    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float32)

    def __call__(self, x):
        return T.Tensor(np.tile(self.logits, (len(x), 1)))


class TableModel:
    """Returns a fixed logit row per sample, looked up by the first input pixel."""

    def __init__(self, table):
        self.table = np.asarray(table, dtype=np.float32)

    def __call__(self, x):
        return T.Tensor(self.table[x[:, 0, 0, 0].astype(int)])


def batches_of(labels, size=4):
    labels = np.asarray(labels)
    for start in range(0, len(labels), size):
        ids = np.arange(start, min(start + size, len(labels)))
        x = np.zeros((len(ids), 1, 1, 1), dtype=np.float32)
        x[:, 0, 0, 0] = ids
        yield Batch(x, labels[ids], [f"s{i}" for i in ids])
