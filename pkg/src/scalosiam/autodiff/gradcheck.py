"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from . import ops


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _traced(fn):
    """Evaluate ``fn`` and return ``(value, branch_patterns)``."""
    ops._branch_trace = []
    try:
        value = float(fn().data.reshape(-1)[0])
        return value, ops._branch_trace
    finally:
        ops._branch_trace = None


def _same_branches(t1, t2):
    return len(t1) == len(t2) and all(np.array_equal(a, b) for a, b in zip(t1, t2))


def grad_check(fn, inputs, eps=1e-5, indices=None, floor=1e-8, stats=None):
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` rebuilds the graph from the current ``inputs`` data on each call
    and returns a scalar tensor. ``indices`` optionally restricts the check
    to a subset of flat positions per input (a dict keyed by ``id(tensor)``
    or a list aligned with ``inputs``); by default every element is probed.

    A probe whose ``+eps`` or ``-eps`` evaluation takes a different branch
    of any piecewise op (relu, abs, max pool, clamp) than the base point is
    skipped: the function is not differentiable across that interval, so the
    central difference is no oracle there. ``stats``, if a dict, receives
    ``probed`` and ``skipped`` counts. Returns the maximum relative error
    over the probed elements.
    """
    for x in inputs:
        if not x.requires_grad:
            raise ValueError("grad_check: every input must require grad")
        x.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError(f"grad_check: output must be scalar, got shape {out.shape}")
    out.backward()
    _, base = _traced(fn)
    worst, probed, skipped = 0.0, 0, 0
    for pos, x in enumerate(inputs):
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
        flat = x.data.reshape(-1)
        if indices is None:
            probe = range(flat.size)
        elif isinstance(indices, dict):
            probe = indices[id(x)]
        else:
            probe = indices[pos]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            hi, t_hi = _traced(fn)
            flat[i] = orig - eps
            lo, t_lo = _traced(fn)
            flat[i] = orig
            if not (_same_branches(base, t_hi) and _same_branches(base, t_lo)):
                skipped += 1
                continue
            numeric = (hi - lo) / (2 * eps)
            err = float(relative_error(analytic.reshape(-1)[i], numeric, floor))
            worst = max(worst, err)
            probed += 1
    if stats is not None:
        stats["probed"] = stats.get("probed", 0) + probed
        stats["skipped"] = stats.get("skipped", 0) + skipped
    return worst
