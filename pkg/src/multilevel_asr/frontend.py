"""Acoustic front end and corpus handling.

* :func:`compute_fbank` - 80-dim log-mel filterbank, 25 ms window / 10 ms shift.
* :func:`spec_augment` - frequency and time masking.
* :func:`generate_synthetic_corpus` - seed-deterministic toy corpus whose
  labels come from a generated lexicon with homophones.
* :func:`write_corpus` / :func:`read_corpus` - the on-disk layout.

Corpus directory layout::

    lexicon.txt  chars.txt  syllables.txt
    <split>.tsv             id<TAB>feature path<TAB>syllables<TAB>characters
    feats/<id>.fbk          header + row-major little-endian floats

Feature file header (little-endian, 16 bytes): magic ``b"FBK1"``, uint32 T,
uint32 D, uint32 bytes-per-value (4 = float32, 8 = float64).
"""

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, InputError
from .lexicon import BLANK, Lexicon, Vocabulary, build_vocabularies, transcribe_to_syllables

SAMPLE_RATE = 16000
FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
FFT_SIZE = 512
PREEMPHASIS = 0.97
LOW_FREQ = 20.0
HIGH_FREQ = 8000.0
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"FBK1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_length_ms: int = FRAME_LENGTH_MS

    @property
    def num_frames(self):
        return self.frames.shape[0]


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    syllables: list
    characters: list

    @property
    def num_frames(self):
        return self.features.shape[0]


# -- filterbank -------------------------------------------------------------


def mel_scale(freq):
    return 1127.0 * np.log1p(np.asarray(freq, dtype=np.float64) / 700.0)


def mel_filterbank(num_bins=80, fft_size=FFT_SIZE, sample_rate=SAMPLE_RATE,
                   low_freq=LOW_FREQ, high_freq=HIGH_FREQ):
    """Triangular filters in the mel domain, shape (num_bins, fft_size // 2 + 1)."""
    mel_lo, mel_hi = mel_scale(low_freq), mel_scale(high_freq)
    edges = np.linspace(mel_lo, mel_hi, num_bins + 2)
    fft_mel = mel_scale(np.arange(fft_size // 2 + 1) * sample_rate / fft_size)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (fft_mel - left) / (center - left)
    down = (right - fft_mel) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def mel_band_centers(num_bins=80, low_freq=LOW_FREQ, high_freq=HIGH_FREQ):
    """Center frequency in Hz of every mel band."""
    edges = np.linspace(mel_scale(low_freq), mel_scale(high_freq), num_bins + 2)
    return 700.0 * np.expm1(edges[1:-1] / 1127.0)


def povey_window(length):
    n = np.arange(length)
    return (0.5 - 0.5 * np.cos(2 * np.pi * n / (length - 1))) ** 0.85


def compute_fbank(samples, sample_rate_hz=SAMPLE_RATE, num_bins=80):
    """Log-mel filterbank energies.

    Each frame independently gets DC removal, pre-emphasis, a Povey window
    and a 512-point power spectrum, so shifting the signal by one frame
    shift only drops the first frame.
    """
    if sample_rate_hz != SAMPLE_RATE:
        raise ConfigError(f"sample rate {sample_rate_hz} Hz unsupported; resample to {SAMPLE_RATE} Hz")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise InputError(f"expected mono samples, got shape {samples.shape}")
    window = SAMPLE_RATE * FRAME_LENGTH_MS // 1000
    shift = SAMPLE_RATE * FRAME_SHIFT_MS // 1000
    if len(samples) < window:
        raise InputError(f"audio has {len(samples)} samples; at least {window} needed for one frame")
    num_frames = 1 + (len(samples) - window) // shift
    frames = np.lib.stride_tricks.sliding_window_view(samples, window)[::shift][:num_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    emphasized = np.empty_like(frames)
    emphasized[:, 1:] = frames[:, 1:] - PREEMPHASIS * frames[:, :-1]
    emphasized[:, 0] = frames[:, 0] * (1.0 - PREEMPHASIS)
    spectrum = np.fft.rfft(emphasized * povey_window(window), n=FFT_SIZE, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ mel_filterbank(num_bins).T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32))


def read_wav(path):
    """Read 16-bit mono PCM; returns (samples as float64, sample rate)."""
    with wave.open(str(path), "rb") as wav:
        if wav.getnchannels() != 1 or wav.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit mono PCM")
        rate = wav.getframerate()
        raw = wav.readframes(wav.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64), rate


def write_wav(path, samples, sample_rate=SAMPLE_RATE):
    data = np.clip(np.round(samples), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(sample_rate)
        wav.writeframes(data.tobytes())


# -- SpecAugment ------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentPolicy:
    num_freq_masks: int = 2
    max_freq_width: int = 10
    num_time_masks: int = 2
    max_time_width: int = 50
    min_freq_width: int = 0
    min_time_width: int = 0


def spec_augment(features, policy, rng):
    """Mask random frequency bands and time spans with the utterance mean.

    Returns a new array; widths larger than the feature dimension are clipped.
    """
    frames = np.asarray(features)
    steps, dim = frames.shape
    out = frames.copy()
    fill = frames.mean(axis=0)
    for _ in range(policy.num_freq_masks):
        hi = min(policy.max_freq_width, dim)
        width = int(rng.integers(min(policy.min_freq_width, hi), hi + 1))
        start = int(rng.integers(0, dim - width + 1))
        out[:, start:start + width] = fill[start:start + width]
    for _ in range(policy.num_time_masks):
        hi = min(policy.max_time_width, steps)
        width = int(rng.integers(min(policy.min_time_width, hi), hi + 1))
        start = int(rng.integers(0, steps - width + 1))
        out[start:start + width] = fill
    return out


# -- synthetic corpus -------------------------------------------------------

_INITIALS = ("b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j",
             "q", "x", "zh", "ch", "sh", "r", "z", "c", "s")
_FINALS = ("a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong")
_CJK_FIRST = 0x4E00


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_utterances: int = 64
    syllable_vocab_size: int = 12
    character_vocab_size: int = 16
    frames_per_syllable_range: tuple = (6, 10)
    utterance_length_range: tuple = (3, 8)
    feature_dim: int = 80
    noise_stddev: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.frames_per_syllable_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad frames_per_syllable_range {self.frames_per_syllable_range}")
        if self.noise_stddev < 0:
            raise ConfigError("noise_stddev must be >= 0")
        if self.syllable_vocab_size < 2 or self.character_vocab_size < 2:
            raise ConfigError("vocabulary sizes must be >= 2")
        if self.character_vocab_size < self.syllable_vocab_size:
            raise ConfigError("need at least one character per syllable")
        lo, hi = self.utterance_length_range
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad utterance_length_range {self.utterance_length_range}")


@dataclass
class SyntheticWorld:
    """Everything shared by all utterances generated from one spec.

    Homophones are resolved by context: for a syllable with m candidate
    characters, the character at index ``prev % m`` is used, where ``prev``
    is the index of the preceding syllable (0 at the start).  A causal
    decoder can therefore learn the mapping exactly.
    """

    spec: SyntheticCorpusSpec
    syllable_tokens: list
    homophones: dict
    lexicon: Lexicon
    char_vocab: Vocabulary
    syl_vocab: Vocabulary
    prototypes: np.ndarray = field(repr=False)

    @classmethod
    def from_spec(cls, spec):
        rng = np.random.default_rng([spec.seed, 0])
        pool = [f"{i}{f}{t}" for i in _INITIALS for f in _FINALS for t in range(1, 5)]
        picks = rng.choice(len(pool), spec.syllable_vocab_size, replace=False)
        syllables = sorted(pool[i] for i in picks)
        glyphs = rng.choice(2000, spec.character_vocab_size, replace=False)
        chars = [chr(_CJK_FIRST + int(g)) for g in glyphs]
        owner = list(range(spec.syllable_vocab_size))
        owner += rng.integers(0, spec.syllable_vocab_size, spec.character_vocab_size - len(owner)).tolist()
        homophones = {s: [] for s in syllables}
        lexicon = Lexicon()
        for char, idx in zip(chars, owner):
            homophones[syllables[idx]].append(char)
            lexicon[char] = [syllables[idx]]
        lexicon = Lexicon(sorted(lexicon.items()))
        char_vocab, syl_vocab = build_vocabularies([chars], lexicon)
        prototypes = rng.standard_normal((spec.syllable_vocab_size, spec.feature_dim))
        return cls(spec, syllables, homophones, lexicon, char_vocab, syl_vocab, prototypes)

    def characters_for(self, syllable_indices):
        chars, prev = [], 0
        for idx in syllable_indices:
            cands = self.homophones[self.syllable_tokens[idx]]
            chars.append(cands[prev % len(cands)])
            prev = idx
        return chars

    def utterance(self, index):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, 1, index])
        n = int(rng.integers(spec.utterance_length_range[0], spec.utterance_length_range[1] + 1))
        idx = rng.integers(0, spec.syllable_vocab_size, n).tolist()
        lo, hi = spec.frames_per_syllable_range
        reps = rng.integers(lo, hi + 1, n)
        frames = np.repeat(self.prototypes[idx], reps, axis=0)
        if spec.noise_stddev > 0:
            frames = frames + spec.noise_stddev * rng.standard_normal(frames.shape)
        chars = self.characters_for(idx)
        syl_tokens = transcribe_to_syllables(chars, self.lexicon)
        return Utterance(
            id=f"syn{spec.seed:04d}_{index:05d}",
            features=frames.astype(np.float32),
            syllables=self.syl_vocab.encode(syl_tokens),
            characters=self.char_vocab.encode(chars),
        )


def generate_synthetic_corpus(spec, first_index=0):
    """Utterances ``first_index .. first_index + num_utterances - 1`` of the world for ``spec``."""
    world = SyntheticWorld.from_spec(spec)
    return [world.utterance(first_index + i) for i in range(spec.num_utterances)]


# -- on-disk corpus ---------------------------------------------------------


def write_features(path, frames):
    frames = np.ascontiguousarray(frames)
    width = frames.dtype.itemsize
    if width not in (4, 8):
        raise DataError(f"unsupported feature dtype {frames.dtype}")
    header = _HEADER.pack(FEATURE_MAGIC, frames.shape[0], frames.shape[1], width)
    Path(path).write_bytes(header + frames.astype(f"<f{width}").tobytes())


def read_features(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, steps, dim, width = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC or width not in (4, 8):
        raise DataError(f"{path}: not a feature file")
    expected = _HEADER.size + steps * dim * width
    if len(raw) != expected or steps < 1:
        raise DataError(f"{path}: size {len(raw)} does not match header ({steps}x{dim})")
    return np.frombuffer(raw, dtype=f"<f{width}", offset=_HEADER.size).reshape(steps, dim).copy()


def write_corpus(directory, splits, lexicon, char_vocab, syl_vocab):
    """Write ``splits`` (name -> list of Utterance) plus lexicon and vocabularies."""
    root = Path(directory)
    (root / "feats").mkdir(parents=True, exist_ok=True)
    lexicon.save(root / "lexicon.txt")
    char_vocab.save(root / "chars.txt")
    syl_vocab.save(root / "syllables.txt")
    for name, utts in splits.items():
        lines = []
        for utt in utts:
            rel = f"feats/{utt.id}.fbk"
            write_features(root / rel, utt.features)
            syl = " ".join(syl_vocab.decode(utt.syllables))
            chars = " ".join(char_vocab.decode(utt.characters))
            lines.append(f"{utt.id}\t{rel}\t{syl}\t{chars}\n")
        (root / f"{name}.tsv").write_text("".join(lines), encoding="utf-8")


@dataclass
class Corpus:
    utterances: list
    lexicon: Lexicon
    char_vocab: Vocabulary
    syl_vocab: Vocabulary


def read_corpus(directory, split="train"):
    """Load and validate one split of a corpus directory."""
    root = Path(directory)
    lexicon = Lexicon.load(root / "lexicon.txt")
    char_vocab = Vocabulary.load(root / "chars.txt")
    syl_vocab = Vocabulary.load(root / "syllables.txt")
    if syl_vocab.blank != 0:
        raise DataError("syllable vocabulary must have <blank> at id 0")
    utts, seen = [], set()
    text = (root / f"{split}.tsv").read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{split}.tsv line {lineno}: expected 4 fields")
        uid, rel, syl, chars = parts
        if uid in seen:
            raise DataError(f"{split}.tsv line {lineno}: duplicate id {uid}")
        seen.add(uid)
        syl, chars = syl.split(), chars.split()
        unknown = [t for t in syl if t not in syl_vocab] + [t for t in chars if t not in char_vocab]
        if unknown:
            raise DataError(f"{split}.tsv line {lineno}: unknown tokens {unknown}")
        if len(syl) != len(chars):
            raise DataError(f"{split}.tsv line {lineno}: {len(syl)} syllables vs {len(chars)} characters")
        if BLANK in syl:
            raise DataError(f"{split}.tsv line {lineno}: blank in labels")
        utts.append(Utterance(uid, read_features(root / rel), syl_vocab.encode(syl), char_vocab.encode(chars)))
    return Corpus(utts, lexicon, char_vocab, syl_vocab)
