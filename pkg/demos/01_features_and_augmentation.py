"""
Log-mel features and SpecAugment
================================

Turn a waveform into 80-band log-mel frames, then mask a few bands and
frames the way training does.
"""

import numpy as np

from multilevel_asr.frontend import SpecAugmentPolicy, compute_fbank, mel_band_centers, spec_augment

# one second of a tone sitting exactly on the centre of band 40, plus a little noise
rate = 16000
t = np.arange(rate) / rate
rng = np.random.default_rng(0)
samples = 3000 * np.sin(2 * np.pi * mel_band_centers()[40] * t) + rng.normal(0, 30, rate)

feats = compute_fbank(samples)
print(f"{len(samples)} samples -> {feats.num_frames} frames x {feats.frames.shape[1]} bands "
      f"({feats.frame_length_ms} ms window, {feats.frame_shift_ms} ms shift)")

# the loudest band in every frame is the one the tone was tuned to
peaks = np.bincount(feats.frames.argmax(axis=1))
print("most common peak band:", int(peaks.argmax()))

# augmentation: masked regions are filled with the utterance mean
policy = SpecAugmentPolicy(num_freq_masks=2, max_freq_width=10, num_time_masks=2, max_time_width=20)
masked = spec_augment(feats.frames, policy, np.random.default_rng(1))
at_mean = np.isclose(masked, feats.frames.mean(axis=0))
print(f"{at_mean.all(axis=0).sum()} bands and {at_mean.all(axis=1).sum()} frames fully masked")

# same generator seed, same masks
again = spec_augment(feats.frames, policy, np.random.default_rng(1))
print("reproducible:", bool(np.array_equal(masked, again)))
