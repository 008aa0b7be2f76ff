import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multilevel_asr import tensor as T
from multilevel_asr.errors import ConfigError, ContractError, InfeasibleError
from multilevel_asr.losses import (
    LossConfig,
    ce_loss,
    ce_loss_batch,
    combine,
    ctc_loss,
    ctc_loss_batch,
    ctc_min_frames,
    inter_ce_loss,
)
from multilevel_asr.oracles import check_gradients, ctc_nll_brute_force
from multilevel_asr.selftest import random_ctc_instance


def log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def f64(x):
    return T.Tensor(x, dtype=np.float64)


# -- CTC -----------------------------------------------------------------------------


def test_single_frame_uniform_is_log_three():
    lp = np.log(np.full((1, 3), 1 / 3))
    assert ctc_loss(f64(lp), [1]).item() == pytest.approx(math.log(3), abs=1e-12)


def test_two_frames_matches_enumeration():
    lp = log_softmax(np.random.default_rng(0).standard_normal((2, 3)))
    p = np.exp(lp)
    # aa, a-, -a
    expected = -math.log(p[0, 1] * p[1, 1] + p[0, 1] * p[1, 0] + p[0, 0] * p[1, 1])
    assert ctc_loss(f64(lp), [1]).item() == pytest.approx(expected, abs=1e-12)


def test_repeat_needs_separating_blank():
    assert ctc_min_frames([1, 1]) == 3 and ctc_min_frames([1, 2]) == 2 and ctc_min_frames([]) == 0
    lp = log_softmax(np.zeros((2, 3)))
    with pytest.raises(InfeasibleError, match="T'=2.*3"):
        ctc_loss(f64(lp), [1, 1])
    assert math.isfinite(ctc_loss(f64(log_softmax(np.zeros((3, 3)))), [1, 1]).item())


def test_blank_in_labels_is_rejected():
    with pytest.raises(ContractError):
        ctc_loss(f64(log_softmax(np.zeros((4, 3)))), [1, 0])


def test_empty_label_sequence_is_all_blank_path():
    lp = log_softmax(np.random.default_rng(1).standard_normal((4, 3)))
    assert ctc_loss(f64(lp), []).item() == pytest.approx(-lp[:, 0].sum(), abs=1e-12)


def test_oracle_agreement_on_random_instances():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(200):
        lp, labels = random_ctc_instance(rng)
        fast = ctc_loss(f64(lp), labels).item()
        worst = max(worst, abs(fast - ctc_nll_brute_force(lp, labels)))
    assert worst < 1e-5


def test_batch_matches_single_with_padding():
    rng = np.random.default_rng(3)
    lps = [log_softmax(rng.standard_normal((t, 5))) for t in (6, 4, 5)]
    labels = [[1, 2, 2], [3], [4, 1]]
    padded = np.full((3, 6, 5), -7.0)
    for i, lp in enumerate(lps):
        padded[i, :len(lp)] = lp
    batch = ctc_loss_batch(f64(padded), [6, 4, 5], labels).data
    for i, (lp, lab) in enumerate(zip(lps, labels)):
        assert batch[i] == pytest.approx(ctc_loss(f64(lp), lab).item(), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_relabeling_non_blank_symbols_leaves_loss_unchanged(seed):
    rng = np.random.default_rng(seed)
    lp, labels = random_ctc_instance(rng, max_frames=6, max_labels=3, max_vocab=4)
    vocab = lp.shape[1]
    perm = np.concatenate([[0], 1 + rng.permutation(vocab - 1)])
    # new symbol perm[s] carries the column of old symbol s
    relabeled = np.empty_like(lp)
    relabeled[:, perm] = lp
    new_labels = [int(perm[s]) for s in labels]
    a = ctc_loss(f64(lp), labels).item()
    b = ctc_loss(f64(relabeled), new_labels).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_ctc_gradient_finite_differences():
    rng = np.random.default_rng(5)
    for _ in range(10):
        lp, labels = random_ctc_instance(rng)
        assert check_gradients(lambda x: ctc_loss(x, labels), lp) < 1e-6


def test_ctc_nonnegative_for_normalized_inputs():
    rng = np.random.default_rng(8)
    for _ in range(20):
        lp, labels = random_ctc_instance(rng)
        assert ctc_loss(f64(lp), labels).item() >= 0.0


# -- cross entropy --------------------------------------------------------------------


def test_ce_zero_when_target_is_certain():
    lp = np.log(np.array([[1e-300, 1.0, 1e-300]]))
    assert ce_loss(f64(lp), [1], 0.0).item() == pytest.approx(0.0, abs=1e-12)


def test_ce_uniform_is_log_vocab():
    lp = np.log(np.full((3, 7), 1 / 7))
    assert ce_loss(f64(lp), [0, 3, 6], 0.0).item() == pytest.approx(math.log(7), abs=1e-12)


def test_ce_smoothing_hand_value():
    p = np.array([0.5, 0.2, 0.2, 0.1])
    expected = -(0.9 * math.log(0.5) + (0.1 / 3) * (math.log(0.2) * 2 + math.log(0.1)))
    assert ce_loss(f64(np.log(p)[None]), [0], 0.1).item() == pytest.approx(expected, abs=1e-12)


def test_ce_smoothed_minimum_is_target_entropy():
    q = np.array([0.9, 0.1 / 3, 0.1 / 3, 0.1 / 3])
    entropy = -(q * np.log(q)).sum()
    assert ce_loss(f64(np.log(q)[None]), [0], 0.1).item() == pytest.approx(entropy, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(20):
        lp = log_softmax(rng.standard_normal((1, 4)) * 2)
        assert ce_loss(f64(lp), [0], 0.1).item() >= entropy - 1e-12


def test_ce_averages_over_positions_per_row():
    rng = np.random.default_rng(2)
    lp = log_softmax(rng.standard_normal((2, 4, 5)))
    targets = [[1, 2, 3], [4, 0]]
    out = ce_loss_batch(f64(lp), targets, 0.1).data
    for b in range(2):
        n = len(targets[b])
        assert out[b] == pytest.approx(ce_loss(f64(lp[b, :n]), targets[b], 0.1).item(), abs=1e-12)


def test_ce_contract_errors():
    lp = f64(log_softmax(np.zeros((2, 3))))
    with pytest.raises(ContractError):
        ce_loss(lp, [0], 0.1)
    with pytest.raises(ContractError):
        ce_loss(lp, [0, 3], 0.1)


def test_ce_gradient_finite_differences():
    x = np.random.default_rng(1).standard_normal((4, 5))
    assert check_gradients(lambda z: ce_loss(T.log_softmax(z), [0, 3, 1, 4], 0.1), x) < 1e-6


# -- InterCE and mixing -------------------------------------------------------------------


def test_inter_modes():
    assert LossConfig(inter_mode="I1").tap_set == (2, 4)
    assert LossConfig(inter_mode="I1").inter_level == "syllable"
    assert LossConfig(inter_mode="I2").inter_level == "character"
    assert LossConfig(inter_mode="I3").tap_set == (3,)
    assert LossConfig(inter_mode="I4").inter_level == "character"
    cfg = LossConfig(alpha=0.1, inter_mode="I3")
    assert cfg.beta == 0.4 and cfg.k == 1
    assert LossConfig().beta == 0.0 and LossConfig().tap_set == ()
    assert LossConfig(inter_mode="I3", beta=0.0).tap_set == ()


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(alpha=0.8, beta=0.4, inter_mode="I3")
    with pytest.raises(ConfigError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossConfig(beta=0.3)
    with pytest.raises(ConfigError):
        LossConfig(inter_mode="I9")


def test_character_level_tap_equals_main_ce_on_same_logits():
    lp = f64(log_softmax(np.random.default_rng(4).standard_normal((3, 6))))
    cfg = LossConfig(inter_mode="I4")
    chars, syls = [1, 2, 5], [3, 3, 4]
    inter = inter_ce_loss({3: lp}, cfg, syls, chars)
    assert inter[3].item() == ce_loss(lp, chars, 0.1).item()


def test_syllable_level_hand_value():
    p = np.array([0.1, 0.6, 0.3])
    cfg = LossConfig(inter_mode="I3", label_smoothing=0.1)
    got = inter_ce_loss({3: f64(np.log(p)[None])}, cfg, [1], [2])[3].item()
    expected = -(0.9 * math.log(0.6) + 0.05 * math.log(0.1) + 0.05 * math.log(0.3))
    assert got == pytest.approx(expected, abs=1e-12)


def test_multiple_positions_return_two_entries():
    lp = f64(log_softmax(np.zeros((2, 4))))
    out = inter_ce_loss({2: lp, 4: lp}, LossConfig(inter_mode="I1"), [1, 2], [1, 2])
    assert sorted(out) == [2, 4]
    with pytest.raises(ContractError):
        inter_ce_loss({2: lp}, LossConfig(inter_mode="I1"), [1, 2], [1, 2])


def scalar(v):
    return T.Tensor(np.float32(v), requires_grad=True)


def test_combine_examples():
    out = combine(scalar(2.0), scalar(0.5), {3: scalar(1.0)}, LossConfig(alpha=0.1, beta=0.4, tap_set=(3,)))
    assert out.total.item() == pytest.approx(0.85, abs=1e-6)
    assert combine(scalar(2.0), scalar(0.5), {}, LossConfig(alpha=1.0)).total.item() == 2.0
    assert combine(scalar(2.0), scalar(0.5), {}, LossConfig(alpha=0.0)).total.item() == 0.5


def test_beta_zero_is_two_term_mix_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(50):
        ctc, att = np.float32(rng.uniform(0, 10)), np.float32(rng.uniform(0, 10))
        alpha = float(rng.uniform(0, 1))
        got = combine(scalar(ctc), scalar(att), {}, LossConfig(alpha=alpha, beta=0.0)).total.data
        expected = ctc * np.float32(alpha) + att * np.float32(1.0 - alpha)
        assert got.tobytes() == np.float32(expected).tobytes()


@pytest.mark.parametrize("mode,alpha", [("I1", 0.1), ("I3", 0.3), ("none", 0.25)])
def test_component_gradients_equal_weights(mode, alpha):
    cfg = LossConfig(alpha=alpha, inter_mode=mode)
    ctc, att = scalar(1.5), scalar(0.7)
    inter = {e: scalar(1.0 + e) for e in cfg.tap_set}
    out = combine(ctc, att, inter, cfg)
    T.backward(out.total)
    w_ctc, w_tap, w_att = cfg.weights
    assert ctc.grad == pytest.approx(w_ctc, abs=1e-7)
    assert att.grad == pytest.approx(w_att, abs=1e-7)
    for t in inter.values():
        assert t.grad == pytest.approx(w_tap, abs=1e-7)
    values = out.as_floats()
    recon = w_ctc * values["ctc"] + w_att * values["att"] + sum(w_tap * values[f"inter_{e}"] for e in cfg.tap_set)
    assert values["total"] == pytest.approx(recon, abs=1e-6)


def test_combine_rejects_tap_mismatch():
    with pytest.raises(ContractError):
        combine(scalar(1.0), scalar(1.0), {}, LossConfig(inter_mode="I3"))
