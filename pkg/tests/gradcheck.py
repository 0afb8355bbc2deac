"""Central finite-difference oracle, independent of the autodiff engine."""

import contextlib

import numpy as np

from fedadg import tensor as T

EPS = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def numeric_grad(f, arr, eps=EPS):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        fp = f()
        arr[i] = old - eps
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic, numeric):
    """Largest relative error over entries whose absolute error exceeds the 1e-6 floor."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff <= ABS_FLOOR, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


def check_leaves(loss_fn, leaves):
    """Backprop ``loss_fn()`` and compare every leaf's grad with finite differences.

    Returns the worst relative error across leaves.
    """
    for p in leaves:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.copy() for p in leaves]
    worst = 0.0
    for p, a in zip(leaves, analytic):
        num = numeric_grad(lambda: loss_fn().item(), p.data)
        worst = max(worst, max_rel_error(a, num))
        p.grad = None
    return worst


@contextlib.contextmanager
def relu_margin():
    """Record the smallest |input| any relu sees while the block runs.

    A central difference that straddles the kink is not a valid oracle, so
    callers redraw instances whose margin is below a few ``EPS``.
    """
    seen = [np.inf]
    original = T.relu

    def probe(a):
        seen[0] = min(seen[0], float(np.abs(a.data).min()))
        return original(a)

    T.relu = probe
    try:
        yield seen
    finally:
        T.relu = original
