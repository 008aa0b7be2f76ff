import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multilevel_asr.errors import ConfigError, DataError, InputError
from multilevel_asr.frontend import (
    SpecAugmentPolicy,
    SyntheticCorpusSpec,
    SyntheticWorld,
    compute_fbank,
    generate_synthetic_corpus,
    mel_band_centers,
    read_corpus,
    read_features,
    read_wav,
    spec_augment,
    write_corpus,
    write_features,
    write_wav,
)


def reference_fbank_frame(frame, num_bins=80):
    """Per-frame log-mel energies via a direct O(N^2) DFT and loop-built filters."""
    x = np.asarray(frame, dtype=np.float64)
    x = x - x.mean()
    y = np.empty_like(x)
    y[0] = x[0] - 0.97 * x[0]
    for n in range(1, len(x)):
        y[n] = x[n] - 0.97 * x[n - 1]
    length = len(y)
    win = np.array([(0.5 - 0.5 * math.cos(2 * math.pi * n / (length - 1))) ** 0.85 for n in range(length)])
    y = y * win
    n_fft = 512
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(length)[None, :]
    spec = (y[None, :] * np.exp(-2j * np.pi * k * n / n_fft)).sum(axis=1)
    power = np.abs(spec) ** 2

    def mel(f):
        return 1127.0 * math.log(1.0 + f / 700.0)

    lo, hi = mel(20.0), mel(8000.0)
    step = (hi - lo) / (num_bins + 1)
    energies = []
    for b in range(num_bins):
        left, center, right = lo + b * step, lo + (b + 1) * step, lo + (b + 2) * step
        total = 0.0
        for j in range(n_fft // 2 + 1):
            m = mel(j * 16000.0 / n_fft)
            if left < m <= center:
                total += power[j] * (m - left) / (center - left)
            elif center < m < right:
                total += power[j] * (right - m) / (right - center)
        energies.append(math.log(max(total, 1e-10)))
    return np.array(energies)


def test_frame_counts():
    assert compute_fbank(np.ones(400)).num_frames == 1
    assert compute_fbank(np.random.default_rng(0).standard_normal(16000)).num_frames == 98
    assert compute_fbank(np.zeros(559)).num_frames == 1
    assert compute_fbank(np.zeros(560)).num_frames == 2


def test_frame_metadata():
    feats = compute_fbank(np.zeros(1000))
    assert (feats.frame_shift_ms, feats.frame_length_ms) == (10, 25)
    assert feats.frames.shape[1] == 80


@pytest.mark.parametrize("band", [30, 50, 70])
def test_sine_at_band_center_peaks_in_that_band(band):
    freq = mel_band_centers()[band]
    t = np.arange(400) / 16000.0
    samples = 1000.0 * np.sin(2 * np.pi * freq * t)
    got = compute_fbank(samples).frames[0]
    ref = reference_fbank_frame(samples)
    assert int(np.argmax(ref)) == band
    assert int(np.argmax(got)) == band
    np.testing.assert_allclose(got, ref, rtol=1e-4, atol=1e-3)


def test_matches_reference_on_noise():
    samples = np.random.default_rng(3).standard_normal(400) * 300
    np.testing.assert_allclose(compute_fbank(samples).frames[0], reference_fbank_frame(samples),
                               rtol=1e-4, atol=1e-3)


def test_translation_consistency():
    samples = np.random.default_rng(1).standard_normal(4000) * 500
    a = compute_fbank(samples).frames
    b = compute_fbank(samples[160:]).frames
    assert b.shape[0] == a.shape[0] - 1
    np.testing.assert_allclose(b, a[1:], atol=1e-5)


def test_silence_is_floored():
    frames = compute_fbank(np.zeros(800)).frames
    assert np.all(np.isfinite(frames))
    np.testing.assert_allclose(frames, math.log(1e-10), rtol=1e-6)


def test_fbank_errors():
    with pytest.raises(InputError):
        compute_fbank(np.zeros(399))
    with pytest.raises(ConfigError):
        compute_fbank(np.zeros(800), sample_rate_hz=8000)


def test_wav_round_trip(tmp_path):
    samples = np.round(np.random.default_rng(2).uniform(-30000, 30000, 1234))
    write_wav(tmp_path / "a.wav", samples)
    back, rate = read_wav(tmp_path / "a.wav")
    assert rate == 16000
    np.testing.assert_array_equal(back, samples)


# -- SpecAugment ------------------------------------------------------------------------


def test_spec_augment_zero_policy_is_identity():
    feats = np.random.default_rng(0).standard_normal((40, 80))
    out = spec_augment(feats, SpecAugmentPolicy(0, 10, 0, 50), np.random.default_rng(1))
    np.testing.assert_array_equal(out, feats)


def test_spec_augment_full_frequency_mask_gives_mean_rows():
    feats = np.random.default_rng(0).standard_normal((40, 80))
    policy = SpecAugmentPolicy(1, 80, 0, 0, min_freq_width=80)
    out = spec_augment(feats, policy, np.random.default_rng(1))
    np.testing.assert_allclose(out, np.broadcast_to(feats.mean(axis=0), feats.shape))


def test_spec_augment_deterministic_and_pure():
    feats = np.random.default_rng(0).standard_normal((120, 80))
    before = feats.copy()
    a = spec_augment(feats, SpecAugmentPolicy(), np.random.default_rng(7))
    b = spec_augment(feats, SpecAugmentPolicy(), np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(feats, before)


@settings(max_examples=40, deadline=None)
@given(steps=st.integers(1, 60), dim=st.integers(1, 20), seed=st.integers(0, 10_000),
       fw=st.integers(0, 40), tw=st.integers(0, 100))
def test_spec_augment_shape_and_finiteness(steps, dim, seed, fw, tw):
    feats = np.random.default_rng(seed).standard_normal((steps, dim))
    out = spec_augment(feats, SpecAugmentPolicy(3, fw, 3, tw), np.random.default_rng(seed))
    assert out.shape == feats.shape
    assert np.all(np.isfinite(out))


# -- synthetic corpus -------------------------------------------------------------------


def test_synthetic_determinism():
    spec = SyntheticCorpusSpec(num_utterances=8)
    a, b = generate_synthetic_corpus(spec), generate_synthetic_corpus(spec)
    for x, y in zip(a, b):
        assert x.id == y.id and x.syllables == y.syllables and x.characters == y.characters
        np.testing.assert_array_equal(x.features, y.features)


def test_zero_noise_constant_duration_repeats_prototypes():
    spec = SyntheticCorpusSpec(num_utterances=4, noise_stddev=0.0, frames_per_syllable_range=(3, 3))
    world = SyntheticWorld.from_spec(spec)
    for utt in generate_synthetic_corpus(spec):
        n = len(utt.syllables)
        assert utt.num_frames == 3 * n
        # ids are offset by the three specials of the syllable vocabulary
        for i, sid in enumerate(utt.syllables):
            idx = world.syllable_tokens.index(world.syl_vocab.tokens[sid])
            for j in range(3):
                np.testing.assert_array_equal(utt.features[3 * i + j], world.prototypes[idx].astype(np.float32))


def test_synthetic_labels_and_homophones():
    spec = SyntheticCorpusSpec()
    world = SyntheticWorld.from_spec(spec)
    utts = generate_synthetic_corpus(spec)
    assert len(utts) == 64
    assert len(world.syl_vocab) == 12 + 3 and len(world.char_vocab) == 16 + 2
    assert any(len(c) > 1 for c in world.homophones.values())
    for u in utts:
        assert len(u.syllables) == len(u.characters)
        assert world.syl_vocab.blank not in u.syllables
        # each character is pronounced as its syllable
        for s, c in zip(u.syllables, u.characters):
            assert world.lexicon.default(world.char_vocab.tokens[c]) == world.syl_vocab.tokens[s]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n_syl=st.integers(2, 6), extra=st.integers(0, 6))
def test_synthetic_label_lengths_property(seed, n_syl, extra):
    spec = SyntheticCorpusSpec(num_utterances=3, syllable_vocab_size=n_syl,
                               character_vocab_size=n_syl + extra, feature_dim=8, seed=seed)
    for u in generate_synthetic_corpus(spec):
        assert len(u.syllables) == len(u.characters) >= 1


def test_synthetic_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(frames_per_syllable_range=(0, 3))
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(noise_stddev=-1.0)
    with pytest.raises(ConfigError):
        SyntheticCorpusSpec(syllable_vocab_size=1)


def test_feature_file_round_trip_and_validation(tmp_path):
    frames = np.random.default_rng(0).standard_normal((17, 80)).astype(np.float32)
    write_features(tmp_path / "x.fbk", frames)
    np.testing.assert_array_equal(read_features(tmp_path / "x.fbk"), frames)
    raw = (tmp_path / "x.fbk").read_bytes()
    (tmp_path / "bad.fbk").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError):
        read_features(tmp_path / "bad.fbk")
    (tmp_path / "short.fbk").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_features(tmp_path / "short.fbk")


def test_corpus_round_trip(tmp_path):
    spec = SyntheticCorpusSpec(num_utterances=5)
    world = SyntheticWorld.from_spec(spec)
    utts = generate_synthetic_corpus(spec)
    write_corpus(tmp_path, {"train": utts}, world.lexicon, world.char_vocab, world.syl_vocab)
    corpus = read_corpus(tmp_path, "train")
    assert corpus.char_vocab == world.char_vocab and corpus.syl_vocab == world.syl_vocab
    assert dict(corpus.lexicon) == dict(world.lexicon)
    for a, b in zip(utts, corpus.utterances):
        assert (a.id, a.syllables, a.characters) == (b.id, b.syllables, b.characters)
        np.testing.assert_array_equal(a.features, b.features)


def test_corpus_rejects_mismatched_line(tmp_path):
    spec = SyntheticCorpusSpec(num_utterances=2)
    world = SyntheticWorld.from_spec(spec)
    write_corpus(tmp_path, {"train": generate_synthetic_corpus(spec)}, world.lexicon, world.char_vocab,
                 world.syl_vocab)
    manifest = tmp_path / "train.tsv"
    uid, rel, syl, chars = manifest.read_text(encoding="utf-8").splitlines()[0].split("\t")
    manifest.write_text(f"{uid}\t{rel}\t{syl}\t{chars.split()[0]}\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_corpus(tmp_path, "train")
