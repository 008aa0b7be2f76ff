"""Slow, obviously-correct reference computations used to check the fast paths."""

import itertools
import math
from functools import lru_cache

import numpy as np

from . import tensor as T


def collapse(path, blank=0):
    """CTC collapse: merge repeats, then drop blanks."""
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_nll_brute_force(log_probs, labels, blank=0):
    """-log of the summed probability of every frame path collapsing to ``labels``."""
    lp = np.asarray(log_probs, dtype=np.float64)
    steps, vocab = lp.shape
    target = tuple(labels)
    total = 0.0
    for path in itertools.product(range(vocab), repeat=steps):
        if collapse(path, blank) == target:
            total += math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def prefix_probabilities_brute_force(log_probs, blank=0):
    """Log-probability of every collapsed output over all |V|^T paths."""
    lp = np.asarray(log_probs, dtype=np.float64)
    steps, vocab = lp.shape
    sums = {}
    for path in itertools.product(range(vocab), repeat=steps):
        key = collapse(path, blank)
        sums[key] = sums.get(key, 0.0) + math.exp(sum(lp[t, s] for t, s in enumerate(path)))
    return {k: math.log(v) for k, v in sums.items() if v > 0}


def edit_distance_recursive(ref, hyp):
    """Levenshtein distance straight from its recursive definition."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def numerical_gradient(f, x, step):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(fn, *arrays, step=1e-6, seed=0, dtype=np.float64, oracle_dtype=None):
    """Compare autodiff and central differences for ``sum(fn(*tensors) * R)``.

    ``R`` is a fixed random projection so every output entry matters.  The
    analytic gradient is taken in ``dtype``; the differences are evaluated in
    ``oracle_dtype`` (default: the same), so a 32-bit engine can be checked
    against a 64-bit oracle.  Returns the worst relative error across inputs.
    """
    oracle_dtype = oracle_dtype or dtype
    rng = np.random.default_rng(seed)
    tensors = [T.Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    with T.default_dtype(dtype):
        out = fn(*tensors)
        proj = rng.standard_normal(out.shape)
        loss = (out * T.Tensor(proj, dtype=dtype)).sum()
        T.backward(loss)

    probes = [T.Tensor(a, dtype=oracle_dtype) for a in arrays]

    def value():
        with T.default_dtype(oracle_dtype), T.no_grad():
            return float((fn(*probes).data.astype(np.float64) * proj).sum())

    worst = 0.0
    for t, probe in zip(tensors, probes):
        numeric = numerical_gradient(value, probe.data, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst
