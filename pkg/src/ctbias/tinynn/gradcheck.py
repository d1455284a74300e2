"""Central finite-difference gradient verification."""

from __future__ import annotations

import numpy as np


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=["readwrite"])
    while not it.finished:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
        it.iternext()
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a| + |n|, floor)``.

    The floor keeps exactly-zero gradients (e.g. a bias feeding batchnorm),
    where the difference quotient is pure roundoff, from reading as failures.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor), initial=0.0))


def check_module(module, x: np.ndarray, rng, train: bool = True, h: float = 1e-5) -> dict[str, float]:
    """Compare a module's backward pass against finite differences.

    Uses the scalar probe ``sum(out * r)`` with a fixed random ``r``. Returns
    the relative error for the input and for every parameter. The error
    floor is raised to sit well above the difference quotient's roundoff
    (``eps * sum|out * r| / h``), so structurally zero gradients such as a conv bias
    feeding train-mode batchnorm read as roundoff rather than failures.
    """
    snap = {k: v.copy() for k, v in module.named_buffers()}

    def restore_buffers():
        for k, v in module.named_buffers():
            v[...] = snap[k]

    out = module.forward(x, train)
    r = rng.normal(size=out.shape)
    dx = module.backward(r)
    grads = {k: g.copy() for k, g in module.named_grads()}
    restore_buffers()

    def f():
        val = float((module.forward(x, train) * r).sum())
        module._cache = None
        restore_buffers()
        return val

    # roundoff in f scales with the summed magnitude of its terms, not with |f|
    scale = float(np.abs(module.forward(x, train) * r).sum())
    module._cache = None
    restore_buffers()
    floor = max(1e-6, 1e5 * np.finfo(np.float64).eps * max(1.0, scale) / h)
    errors = {"input": rel_error(dx, numerical_gradient(f, x, h), floor)}
    for name, p in module.named_params():
        errors[name] = rel_error(grads[name], numerical_gradient(f, p, h), floor)
    return errors
