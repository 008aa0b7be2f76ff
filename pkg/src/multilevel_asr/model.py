"""Encoder-decoder network with a syllable CTC head and a character decoder.

Data flow for a batch::

    features (B, T, D)
      -> two unpadded 3x3 stride-2 convolutions, linear to d_m, + sinusoids
      -> N Transformer or Conformer layers             h_enc (B, T', d_m)
      -> ctc head: log-probabilities over syllables    (B, T', |V_s|)

    [sos] + syllables (B, n+1)
      -> embedding + sinusoids -> L decoder layers      taps after layers in R
      -> char head: log-probabilities over characters  (B, n+1, |V_c|)

Subsampled length: ``T' = ((T - 1) // 2 - 1) // 2``; at least 7 input frames
are needed for one output frame.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InputError
from .nn import (
    ConformerEncoderLayer,
    DecoderLayer,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    parameter,
    sinusoidal_encoding,
    TransformerEncoderLayer,
)

MIN_FRAMES = 7


def subsampled_length(num_frames):
    return ((np.asarray(num_frames) - 1) // 2 - 1) // 2


@dataclass(frozen=True)
class ModelConfig:
    syllable_vocab_size: int
    char_vocab_size: int
    arch: str = "transformer"
    num_encoder_layers: int = 12
    num_decoder_layers: int = 6
    attention_dim: int = 256
    num_heads: int = 4
    ffn_dim: int = 2048
    conv_kernel: int = 15
    dropout_rate: float = 0.1
    input_dim: int = 80
    subsample_channels: int = 0
    inter_taps: tuple = ()
    inter_level: str = "syllable"
    position_encoding: bool = True

    def __post_init__(self):
        object.__setattr__(self, "inter_taps", tuple(sorted(int(e) for e in self.inter_taps)))
        if self.arch not in ("transformer", "conformer"):
            raise ConfigError(f"arch must be 'transformer' or 'conformer', got {self.arch!r}")
        if self.attention_dim % self.num_heads:
            raise ConfigError(f"attention_dim {self.attention_dim} not divisible by num_heads {self.num_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.inter_level not in ("syllable", "character"):
            raise ConfigError(f"inter_level must be 'syllable' or 'character', got {self.inter_level!r}")
        bad = [e for e in self.inter_taps if not 1 <= e < self.num_decoder_layers]
        if bad:
            raise ConfigError(
                f"tap layers {bad} are not intermediate layers of a {self.num_decoder_layers}-layer decoder"
            )
        if self.input_dim < MIN_FRAMES:
            raise ConfigError(f"input_dim must be >= {MIN_FRAMES}")
        for name in ("syllable_vocab_size", "char_vocab_size", "num_encoder_layers", "num_decoder_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def channels(self):
        return self.subsample_channels or self.attention_dim

    @classmethod
    def toy(cls, syllable_vocab_size, char_vocab_size, **overrides):
        """Desk-scale configuration used by the demos and acceptance runs."""
        base = dict(num_encoder_layers=2, num_decoder_layers=6, attention_dim=64, num_heads=4,
                    ffn_dim=256, conv_kernel=15, dropout_rate=0.1, subsample_channels=32)
        base.update(overrides)
        return cls(syllable_vocab_size, char_vocab_size, **base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["inter_taps"] = tuple(d.get("inter_taps", ()))
        return cls(**d)


@dataclass
class EncoderOutput:
    h_enc: T.Tensor
    lengths: np.ndarray

    @property
    def pad_mask(self):
        return np.arange(self.h_enc.shape[1])[None, :] >= self.lengths[:, None]


@dataclass
class DecoderOutput:
    h_dec_final: T.Tensor
    taps: dict = field(default_factory=dict)


class Subsampling(Module):
    def __init__(self, rng, cfg):
        c = cfg.channels
        self.conv1_weight = parameter(rng.normal(0.0, (2.0 / 9) ** 0.5, (c, 1, 3, 3)))
        self.conv1_bias = parameter(np.zeros(c))
        self.conv2_weight = parameter(rng.normal(0.0, (2.0 / (9 * c)) ** 0.5, (c, c, 3, 3)))
        self.conv2_bias = parameter(np.zeros(c))
        freq = ((cfg.input_dim - 1) // 2 - 1) // 2
        self.out = Linear(rng, c * freq, cfg.attention_dim)

    def __call__(self, x):
        """x: (B, T, D) Tensor -> (B, T', d_m)."""
        batch = x.shape[0]
        y = T.reshape(x, (batch, 1) + x.shape[1:])
        y = T.relu(T.conv2d(y, self.conv1_weight, self.conv1_bias, stride=2))
        y = T.relu(T.conv2d(y, self.conv2_weight, self.conv2_bias, stride=2))
        _, c, steps, freq = y.shape
        y = y.transpose(0, 2, 1, 3).reshape(batch, steps, c * freq)
        return self.out(y)


class Encoder(Module):
    def __init__(self, rng, cfg):
        self.subsample = Subsampling(rng, cfg)
        layer = TransformerEncoderLayer if cfg.arch == "transformer" else ConformerEncoderLayer
        self.layers = [layer(rng, cfg) for _ in range(cfg.num_encoder_layers)]
        self.norm = LayerNorm(cfg.attention_dim)
        self.cfg = cfg

    def __call__(self, features, lengths, rng=None):
        features = np.asarray(features)
        lengths = np.asarray(lengths, dtype=np.int64)
        if features.shape[1] < MIN_FRAMES or lengths.min() < MIN_FRAMES:
            raise InputError(f"encoder needs at least {MIN_FRAMES} frames, got {int(lengths.min())}")
        if features.shape[2] != self.cfg.input_dim:
            raise ConfigError(f"feature dim {features.shape[2]} != model input_dim {self.cfg.input_dim}")
        x = self.subsample(T.Tensor(features))
        out_lengths = subsampled_length(lengths)
        if self.cfg.position_encoding:
            x = x + sinusoidal_encoding(x.shape[1], x.shape[2]).astype(x.dtype)
        x = T.dropout(x, self.cfg.dropout_rate, rng)
        return EncoderOutput(self.stack(x, out_lengths, rng), out_lengths)

    def stack(self, x, lengths, rng=None):
        """Run the encoder layers and final norm on already-embedded frames."""
        pad = np.arange(x.shape[1])[None, :] >= np.asarray(lengths)[:, None]
        att_mask = pad[:, None, :]
        for layer in self.layers:
            x = layer(x, att_mask, pad, rng)
        return self.norm(x)


class Decoder(Module):
    def __init__(self, rng, cfg):
        self.embed = Embedding(rng, cfg.syllable_vocab_size, cfg.attention_dim)
        self.layers = [DecoderLayer(rng, cfg) for _ in range(cfg.num_decoder_layers)]
        self.norm = LayerNorm(cfg.attention_dim)
        self.cfg = cfg

    def __call__(self, enc, inputs, lengths, rng=None):
        """inputs: (B, U) syllable ids starting with sos; lengths: valid positions per row."""
        inputs = np.asarray(inputs, dtype=np.int64)
        if inputs.size and (inputs.min() < 0 or inputs.max() >= self.cfg.syllable_vocab_size):
            raise DataError(f"syllable id outside [0, {self.cfg.syllable_vocab_size})")
        steps = inputs.shape[1]
        x = self.embed(inputs)
        if self.cfg.position_encoding:
            x = x + sinusoidal_encoding(steps, x.shape[2]).astype(x.dtype)
        x = T.dropout(x, self.cfg.dropout_rate, rng)
        pad = np.arange(steps)[None, :] >= np.asarray(lengths)[:, None]
        future = np.triu(np.ones((steps, steps), dtype=bool), k=1)
        self_mask = future[None] | pad[:, None, :]
        memory_mask = enc.pad_mask[:, None, :]
        taps = {}
        for depth, layer in enumerate(self.layers, 1):
            x = layer(x, self_mask, enc.h_enc, memory_mask, rng)
            if depth in self.cfg.inter_taps:
                taps[depth] = x
        return DecoderOutput(self.norm(x), taps)


class InterHead(Module):
    """Per-tap classifier: own layer norm and projection, never shared."""

    def __init__(self, rng, dim, vocab):
        self.norm = LayerNorm(dim)
        self.proj = Linear(rng, dim, vocab)

    def __call__(self, h):
        return T.log_softmax(self.proj(self.norm(h)))


class MultiLevelASR(Module):
    """Syllable-level CTC encoder plus syllable-to-character decoder."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng, cfg)
        self.ctc_proj = Linear(rng, cfg.attention_dim, cfg.syllable_vocab_size)
        self.decoder = Decoder(rng, cfg)
        self.char_proj = Linear(rng, cfg.attention_dim, cfg.char_vocab_size)
        width = cfg.syllable_vocab_size if cfg.inter_level == "syllable" else cfg.char_vocab_size
        self.inter_heads = {str(e): InterHead(rng, cfg.attention_dim, width) for e in cfg.inter_taps}
        self.cfg = cfg

    def encode(self, features, lengths=None, rng=None):
        """features: (B, T, D) array (or a single (T, D) utterance)."""
        features = np.asarray(features, dtype=T.get_default_dtype())
        if features.ndim == 2:
            features = features[None]
        if lengths is None:
            lengths = np.full(features.shape[0], features.shape[1])
        return self.encoder(features, lengths, rng)

    def ctc_head(self, h_enc):
        return T.log_softmax(self.ctc_proj(h_enc))

    def decode_step(self, enc, syllable_inputs, lengths=None, rng=None):
        inputs = np.asarray(syllable_inputs, dtype=np.int64)
        if inputs.ndim == 1:
            inputs = inputs[None]
        if lengths is None:
            lengths = np.full(inputs.shape[0], inputs.shape[1])
        return self.decoder(enc, inputs, lengths, rng)

    def char_head(self, h_dec):
        return T.log_softmax(self.char_proj(h_dec))

    def inter_head(self, tap, h_tap):
        return self.inter_heads[str(tap)](h_tap)
