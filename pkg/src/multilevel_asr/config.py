"""Experiment configuration: one JSON file, five sections, dotted overrides.

Layers are applied in order ``defaults < file < command line``::

    {
      "model":  {"preset": "toy", "arch": "conformer"},
      "loss":   {"alpha": 0.1, "inter_mode": "I3"},
      "train":  {"max_steps": 2000},
      "decode": {"beam_size": 10},
      "data":   {"corpus": "corpus", "output": "runs/exp"}
    }

Overrides look like ``loss.alpha=0.3`` and their values are parsed as JSON
when possible (``0.3``, ``true``, ``[2, 4]``), else kept as strings.  Every
key is checked against its section, and every section is validated by
constructing the corresponding config object.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .decode import DecodeConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

# Full-size defaults; vocabulary sizes come from the corpus.
_FULL_MODEL = dict(num_encoder_layers=12, num_decoder_layers=6, attention_dim=256, num_heads=4,
                    ffn_dim=2048, conv_kernel=15, dropout_rate=0.1)
_MODEL_DERIVED = ("syllable_vocab_size", "char_vocab_size", "inter_taps", "inter_level")
MODEL_KEYS = ("preset",) + tuple(f.name for f in fields(ModelConfig) if f.name not in _MODEL_DERIVED)


@dataclass
class DataConfig:
    corpus: str = "corpus"
    train_split: str = "train"
    # split scored every train.eval_interval steps for best.ckpt and early stopping
    eval_split: str = "dev"
    output: str = "runs/default"


SECTIONS = {
    "model": None,
    "loss": LossConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def _coerce(section, key, value, kind):
    where = f"{section}.{key}"
    if value is None:
        return None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if kind is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    return value


def _model_types():
    types = _field_types(ModelConfig)
    types["preset"] = str
    return types


def _section_types(section):
    return _model_types() if section == "model" else _field_types(SECTIONS[section])


def parse_override(text):
    """``'loss.alpha=0.3'`` -> ``('loss', 'alpha', 0.3)``."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} must be section.key")
    section, key = path.split(".")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


class ExperimentConfig:
    """Resolved settings for one experiment; see the module docstring for the file layout."""

    def __init__(self, sections=None):
        self.raw = {name: {} for name in SECTIONS}
        for name, values in (sections or {}).items():
            for key, value in values.items():
                self.set(name, key, value)
        self.validate()

    def set(self, section, key, value):
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(SECTIONS)}")
        types = _section_types(section)
        if key not in types or (section == "model" and key in _MODEL_DERIVED):
            raise ConfigError(f"unknown key {section}.{key}")
        self.raw[section][key] = _coerce(section, key, value, types[key])

    # -- construction ---------------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides=()):
        layers = {}
        if path is not None:
            try:
                layers = json.loads(Path(path).read_text(encoding="utf-8"))
            except FileNotFoundError as exc:
                raise ConfigError(f"config file {path} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path}: {exc}") from exc
            if not isinstance(layers, dict) or not all(isinstance(v, dict) for v in layers.values()):
                raise ConfigError(f"config file {path} must map section names to objects")
        cfg = cls(layers)
        for text in overrides:
            cfg.set(*parse_override(text))
        cfg.validate()
        return cfg

    def validate(self):
        self.loss
        self.train
        self.decode
        self.data
        preset = self.raw["model"].get("preset", "toy")
        if preset not in ("toy", "full"):
            raise ConfigError(f"model.preset must be 'toy' or 'full', got {preset!r}")
        self.model_config(4, 4)
        return self

    # -- typed views ----------------------------------------------------------
    @property
    def loss(self):
        return LossConfig(**self.raw["loss"])

    @property
    def train(self):
        preset = self.raw["model"].get("preset", "toy")
        if preset == "toy":
            return TrainConfig.toy(**self.raw["train"])
        return TrainConfig(**self.raw["train"])

    @property
    def decode(self):
        return DecodeConfig(**self.raw["decode"])

    @property
    def data(self):
        return DataConfig(**self.raw["data"])

    def model_config(self, syllable_vocab_size, char_vocab_size):
        """ModelConfig for the given vocabularies; taps and InterCE level follow the loss section."""
        values = dict(self.raw["model"])
        preset = values.pop("preset", "toy")
        loss = self.loss
        values.update(inter_taps=loss.tap_set, inter_level=loss.inter_level)
        if preset == "toy":
            return ModelConfig.toy(syllable_vocab_size, char_vocab_size, **values)
        return ModelConfig(syllable_vocab_size, char_vocab_size, **{**_FULL_MODEL, **values})

    def resolved(self):
        """Every effective setting, defaults included, as plain JSON-able data."""
        model = self.model_config(4, 4).to_dict()
        for key in _MODEL_DERIVED:
            model.pop(key)
        model["preset"] = self.raw["model"].get("preset", "toy")
        return {
            "model": model,
            "loss": asdict(self.loss),
            "train": asdict(self.train),
            "decode": asdict(self.decode),
            "data": asdict(self.data),
        }

    def to_json(self):
        return json.dumps(self.resolved(), indent=2, sort_keys=True, default=list)
