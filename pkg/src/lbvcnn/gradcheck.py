"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError


def relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x, eps=1e-4, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"function returned a non-finite value at entry {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(fn, params, eps=1e-4, max_entries=None, rng=None):
    """Largest relative error between analytic and central-difference gradients.

    ``fn(params)`` must return ``(value, grads)`` where ``grads`` maps the same
    keys as ``params`` (a dict of float64 arrays, or a single array) to
    analytic gradients. Parameters are perturbed in place and restored.
    ``max_entries`` caps how many entries per parameter are probed; the probed
    entries are drawn with ``rng`` (a :class:`numpy.random.Generator`).
    """
    single = not isinstance(params, dict)
    pdict = {"x": params} if single else params
    value, grads = fn(params)
    if single:
        grads = {"x": grads}
    if not np.isfinite(value):
        raise NonFiniteError("function value is not finite")
    worst = 0.0
    for name, p in pdict.items():
        ga = np.asarray(grads[name], dtype=np.float64)
        if ga.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {ga.shape}, expected {p.shape}")
        if not np.all(np.isfinite(ga)):
            raise NonFiniteError(f"analytic gradient for {name} is not finite")
        indices = None
        if max_entries is not None and p.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            indices = rng.choice(p.size, size=max_entries, replace=False)
        gn = numeric_grad(lambda: float(fn(params)[0]), p, eps, indices)
        sel = slice(None) if indices is None else indices
        err = relative_error(ga.reshape(-1)[sel], gn.reshape(-1)[sel])
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
