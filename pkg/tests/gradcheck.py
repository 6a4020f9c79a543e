"""Finite-difference gradient oracle shared by the test modules."""
import numpy as np

from gridcl import numcore as nc


def numeric_grad(fn, arrays, h=1e-3):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arrays`` (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            up = fn()
            arr[i] = orig - h
            down = fn()
            arr[i] = orig
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def assert_grad_close(analytic, numeric, rel=1e-4, abs_floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (diff > abs_floor) & (diff > rel * scale)
    assert not bad.any(), f"max rel err {np.max(diff / np.maximum(scale, 1e-300))}, worst at {np.argwhere(bad)[:3].tolist()}"


def check_gradients(build_loss, tensors, h=1e-3, rel=1e-4):
    """Compare tape gradients of ``build_loss()`` with finite differences, in float64."""
    for t in tensors:
        t.grad = None
    tape = nc.GradTape()
    with tape:
        loss = build_loss()
    nc.backward(loss, tape)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value():
        with nc.no_grad():
            return float(build_loss().data)

    numeric = numeric_grad(value, [t.data for t in tensors], h)
    for a, n in zip(analytic, numeric):
        assert_grad_close(a, n, rel=rel)
