"""Arithmetic op-count instrumentation.

Counting works by intercepting numpy ufuncs: inputs wrapped with
:func:`instrument` are viewed as :class:`CountingArray`, whose
``__array_ufunc__`` tallies every elementwise add, subtract, multiply and
compare (and the multiply-adds hidden inside ``matmul``) before delegating to
numpy. The tally therefore reflects what the code actually executed, not a
formula.

    with counting() as c:
        ternary_conv3d(instrument(x), bank)
    c.totals()["muls"]  # 0
"""

from __future__ import annotations

import contextlib
import json
from collections import defaultdict

import numpy as np

_ADDS = {np.add}
_SUBS = {np.subtract, np.negative}
_MULS = {np.multiply, np.divide, np.true_divide, np.square, np.reciprocal, np.power}
_CMPS = {np.maximum, np.minimum, np.greater, np.greater_equal, np.less,
         np.less_equal, np.equal, np.not_equal, np.fmax, np.fmin}

_active: list["OpCounter"] = []


class OpCounter:
    """Per-scope tallies of adds, subs, muls and compares."""

    def __init__(self):
        self.counts = defaultdict(lambda: {"adds": 0, "subs": 0, "muls": 0, "compares": 0})
        self._scope = ["<root>"]

    @contextlib.contextmanager
    def scope(self, name):
        self._scope.append(name)
        try:
            yield self
        finally:
            self._scope.pop()

    def add(self, kind, n):
        self.counts[self._scope[-1]][kind] += int(n)

    def totals(self):
        tot = {"adds": 0, "subs": 0, "muls": 0, "compares": 0}
        for c in self.counts.values():
            for k, v in c.items():
                tot[k] += v
        return tot

    def report(self) -> str:
        """One JSON object per scope, one per line."""
        return "\n".join(json.dumps({"layer": name, **c}, sort_keys=True)
                         for name, c in self.counts.items())


@contextlib.contextmanager
def counting():
    counter = OpCounter()
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.remove(counter)


@contextlib.contextmanager
def scope(name):
    """Attribute counted ops to ``name`` (no-op when counting is off)."""
    if not _active:
        yield
        return
    with contextlib.ExitStack() as stack:
        for c in _active:
            stack.enter_context(c.scope(name))
        yield


def active() -> bool:
    return bool(_active)


def _record(ufunc, method, inputs, result):
    if not _active:
        return
    if ufunc is np.matmul:
        a, b = (np.asarray(i) for i in inputs[:2])
        k = a.shape[-1]
        n_out = np.asarray(result).size
        for c in _active:
            c.add("muls", n_out * k)
            c.add("adds", n_out * (k - 1))
        return
    if method == "reduce":
        n = np.asarray(inputs[0]).size - np.asarray(result).size
    else:
        n = np.asarray(result).size
    if ufunc in _ADDS:
        kind = "adds"
    elif ufunc in _SUBS:
        kind = "subs"
    elif ufunc in _MULS:
        kind = "muls"
    elif ufunc in _CMPS:
        kind = "compares"
    else:
        return
    for c in _active:
        c.add(kind, n)


class CountingArray(np.ndarray):
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        plain = [i.view(np.ndarray) if isinstance(i, CountingArray) else i for i in inputs]
        out = kwargs.get("out")
        if out is not None:
            kwargs["out"] = tuple(o.view(np.ndarray) if isinstance(o, CountingArray) else o
                                  for o in out)
        result = getattr(ufunc, method)(*plain, **kwargs)
        _record(ufunc, method, plain, result)
        if out is not None:
            return out[0] if len(out) == 1 else out
        if isinstance(result, np.ndarray):
            return result.view(CountingArray)
        return result


def instrument(x: np.ndarray) -> CountingArray:
    return np.asarray(x).view(CountingArray)


def zeros_like_kind(template, shape, dtype):
    """``np.zeros`` that stays instrumented when ``template`` is."""
    z = np.zeros(shape, dtype=dtype)
    if isinstance(template, CountingArray):
        z = z.view(CountingArray)
    return z


def match_kind(template, arr):
    """View ``arr`` as instrumented when ``template`` is."""
    if isinstance(template, CountingArray) and not isinstance(arr, CountingArray):
        return arr.view(CountingArray)
    return arr
