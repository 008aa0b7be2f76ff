"""Quick numerical self-checks: gradients, CTC, beam search, edit distance."""

import numpy as np

from . import tensor as T
from .decode import DecodeConfig, ctc_prefix_beam_search, edit_distance
from .losses import ce_loss, ctc_loss, ctc_min_frames
from .oracles import (
    check_gradients,
    ctc_nll_brute_force,
    edit_distance_recursive,
    prefix_probabilities_brute_force,
)


def _log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def random_ctc_instance(rng, max_frames=6, max_labels=3, max_vocab=4):
    """Random feasible (log_probs, labels) with blank = 0."""
    vocab = int(rng.integers(2, max_vocab + 1))
    while True:
        steps = int(rng.integers(1, max_frames + 1))
        n = int(rng.integers(0, max_labels + 1))
        labels = rng.integers(1, vocab, n).tolist()
        if ctc_min_frames(labels) <= steps:
            return _log_softmax(rng.standard_normal((steps, vocab)) * 2), labels


def gradient_suite(rng):
    x = rng.standard_normal((3, 4))
    checks = {
        "matmul": (lambda a, b: a @ b, x, rng.standard_normal((4, 2))),
        "softmax": (T.softmax, x),
        "log_softmax": (T.log_softmax, x),
        "layer_norm": (T.layer_norm, rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)),
        "tanh": (T.tanh, x),
        "swish": (T.swish, x),
        "glu": (T.glu, x),
        "ctc": (lambda lp: ctc_loss(lp, [1, 2]), rng.standard_normal((5, 3))),
        "ce_smoothed": (lambda lp: ce_loss(lp, [0, 2, 1], 0.1), rng.standard_normal((3, 4))),
    }
    return {name: check_gradients(fn, *args) for name, (fn, *args) in checks.items()}


def run_selftest(seed=0, out=print):
    """Run every suite; return True when all pass."""
    rng = np.random.default_rng(seed)
    results = []

    errors = gradient_suite(rng)
    worst = max(errors.values())
    results.append(("gradients", worst < 1e-6, f"max relative error {worst:.2e} over {len(errors)} ops"))

    worst = 0.0
    for _ in range(50):
        lp, labels = random_ctc_instance(rng)
        with T.default_dtype(np.float64):
            fast = ctc_loss(T.Tensor(lp), labels).item()
        worst = max(worst, abs(fast - ctc_nll_brute_force(lp, labels)))
    results.append(("ctc-oracle", worst < 1e-5, f"max abs deviation {worst:.2e} over 50 instances"))

    worst = 0.0
    for _ in range(30):
        steps, vocab = int(rng.integers(1, 5)), int(rng.integers(2, 4))
        lp = _log_softmax(rng.standard_normal((steps, vocab)))
        exact = prefix_probabilities_brute_force(lp)
        hyps = ctc_prefix_beam_search(lp, DecodeConfig(beam_size=len(exact) + vocab))
        got = {h.syllables: h.ctc_score for h in hyps}
        if set(got) != set(exact):
            worst = np.inf
            break
        worst = max(worst, max(abs(got[k] - exact[k]) for k in exact))
    results.append(("beam-oracle", worst < 1e-6, f"max abs deviation {worst:.2e} over 30 instances"))

    mismatches = 0
    for _ in range(200):
        a = rng.integers(0, 3, int(rng.integers(0, 7))).tolist()
        b = rng.integers(0, 3, int(rng.integers(0, 7))).tolist()
        mismatches += sum(edit_distance(a, b)) != edit_distance_recursive(a, b)
    results.append(("edit-distance-oracle", mismatches == 0, f"{mismatches} mismatches over 200 pairs"))

    for name, ok, detail in results:
        out(f"{'PASS' if ok else 'FAIL'}  {name:<22} {detail}")
    return all(ok for _, ok, _ in results)
