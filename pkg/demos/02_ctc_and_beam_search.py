"""
CTC loss and prefix beam search
===============================

Score a label sequence against frame posteriors, then search for the most
probable collapsed sequence.  Both are checked against brute-force
enumeration on a case small enough to list every path.
"""

import numpy as np

from multilevel_asr import tensor as T
from multilevel_asr.decode import DecodeConfig, ctc_prefix_beam_search
from multilevel_asr.errors import InfeasibleError
from multilevel_asr.losses import ctc_loss
from multilevel_asr.oracles import ctc_nll_brute_force, prefix_probabilities_brute_force

# four frames over {blank, a, b}; the middle frames favour "a" then "b"
probs = np.array([
    [0.6, 0.3, 0.1],
    [0.2, 0.7, 0.1],
    [0.1, 0.2, 0.7],
    [0.7, 0.1, 0.2],
])
lp = np.log(probs)

with T.default_dtype(np.float64):
    nll = ctc_loss(T.Tensor(lp), [1, 2]).item()
print(f"-log P(a b) dynamic programme: {nll:.6f}")
print(f"-log P(a b) all 3^4 paths:     {ctc_nll_brute_force(lp, [1, 2]):.6f}")

# repeated labels need a blank between them
x = T.Tensor(np.log(np.full((2, 3), 1 / 3)), dtype=np.float64)
try:
    ctc_loss(x, [1, 1])
except InfeasibleError as exc:
    print("two frames cannot hold 'a a':", exc)

# the gradient w.r.t. log-probabilities is minus the symbol occupancy per frame;
# every path emits exactly one symbol per frame, so each row sums to -1
lp_t = T.Tensor(lp, requires_grad=True, dtype=np.float64)
T.backward(ctc_loss(lp_t, [1, 2]))
print("occupancy per frame (blank, a, b):")
print(np.round(-lp_t.grad, 3))

# beam search: wide enough here to keep every prefix, so scores are exact
exact = prefix_probabilities_brute_force(lp)
hyps = ctc_prefix_beam_search(lp, DecodeConfig(beam_size=len(exact) + 3))
names = {0: "-", 1: "a", 2: "b"}
print("\nbest prefixes:")
for h in hyps[:5]:
    label = " ".join(names[s] for s in h.syllables) or "(empty)"
    print(f"  {label:<8} p={np.exp(h.ctc_score):.4f}  exact={np.exp(exact[h.syllables]):.4f}")

# a narrow beam keeps fewer prefixes and can only under-estimate their mass
narrow = ctc_prefix_beam_search(lp, DecodeConfig(beam_size=2))
print("\nbeam 2:", [(" ".join(names[s] for s in h.syllables), round(float(np.exp(h.ctc_score)), 4)) for h in narrow])
