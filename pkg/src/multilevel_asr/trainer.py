"""Optimisation loop: length-bucketed batches, Adam, warmup schedule, clipping.

Every random draw in step ``s`` comes from streams keyed by ``(seed, purpose, s)``,
so a run resumed from a checkpoint at step ``s`` replays step ``s + 1`` exactly.
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .decode import DecodeConfig, evaluate
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .frontend import SpecAugmentPolicy, spec_augment
from .losses import ce_loss_batch, combine, ctc_loss_batch, ctc_min_frames
from .model import MIN_FRAMES, MultiLevelASR, subsampled_length

log = logging.getLogger(__name__)

STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_AUGMENT = 4
DIVERGENCE_PATIENCE = 10


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 5000
    peak_lr: float = 2e-3
    warmup_steps: int = 25000
    grad_clip_norm: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    checkpoint_interval: int = 0
    eval_interval: int = 0
    target_error_rate: float = None
    max_frames_per_batch: int = 0
    spec_augment: bool = False

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be > 0")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be > 0")

    @classmethod
    def toy(cls, **overrides):
        """Shrunk recipe for desk-scale runs: same mechanisms, shorter warmup."""
        base = dict(warmup_steps=500, max_steps=5000)
        base.update(overrides)
        return cls(**base)


def lr_schedule(step, d_model, warmup, scale=1.0):
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("step must be >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def schedule_scale(peak_lr, d_model, warmup):
    """Scale that makes :func:`lr_schedule` peak at ``peak_lr`` (reached at step == warmup)."""
    return peak_lr * math.sqrt(d_model) * math.sqrt(warmup)


def global_grad_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(params, max_norm):
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the factor applied.  Raises NumericError on non-finite gradients
    without touching them.
    """
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(factor)
    return factor


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - (lr * update).astype(p.dtype)


@dataclass
class Batch:
    ids: list
    features: np.ndarray
    lengths: np.ndarray
    syllables: list
    characters: list


def make_batch(utts, augment_rng=None, policy=None):
    lengths = np.array([u.num_frames for u in utts])
    dim = utts[0].features.shape[1]
    feats = np.zeros((len(utts), lengths.max(), dim), dtype=T.get_default_dtype())
    for i, u in enumerate(utts):
        x = u.features
        if augment_rng is not None:
            x = spec_augment(x, policy, augment_rng)
        feats[i, :u.num_frames] = x
    return Batch([u.id for u in utts], feats, lengths,
                 [list(u.syllables) for u in utts], [list(u.characters) for u in utts])


def bucket_batches(utts, batch_size, max_frames=0):
    """Sort by length and cut into batches; ``max_frames`` caps B * T_max."""
    order = sorted(utts, key=lambda u: (u.num_frames, u.id))
    batches, current = [], []
    for u in order:
        grown = current + [u]
        if current and (len(grown) > batch_size or (max_frames and len(grown) * u.num_frames > max_frames)):
            batches.append(current)
            grown = [u]
        current = grown
    if current:
        batches.append(current)
    return batches


def feasible(utt):
    return utt.num_frames >= MIN_FRAMES and int(subsampled_length(utt.num_frames)) >= max(
        ctc_min_frames(utt.syllables), 1)


def forward_loss(model, batch, loss_cfg, syl_eos, char_eos, rng=None):
    """Batch-averaged loss breakdown.

    CTC is normalised per utterance by its number of labels and CE by its
    number of target positions before averaging over the batch.
    """
    enc = model.encode(batch.features, batch.lengths, rng)
    ctc_lp = model.ctc_head(enc.h_enc)
    per_utt = ctc_loss_batch(ctc_lp, enc.lengths, batch.syllables, blank=0)
    label_counts = np.array([max(len(s), 1) for s in batch.syllables], dtype=per_utt.dtype)
    ctc = T.mean(per_utt / label_counts)

    width = max(len(s) for s in batch.syllables) + 1
    dec_in = np.full((len(batch.syllables), width), syl_eos, dtype=np.int64)
    for i, syl in enumerate(batch.syllables):
        dec_in[i, 1:len(syl) + 1] = syl
    dec_lengths = np.array([len(s) + 1 for s in batch.syllables])
    dec = model.decode_step(enc, dec_in, dec_lengths, rng)
    char_targets = [c + [char_eos] for c in batch.characters]
    att = T.mean(ce_loss_batch(model.char_head(dec.h_dec_final), char_targets, loss_cfg.label_smoothing))

    inter = {}
    if loss_cfg.tap_set:
        targets = char_targets if loss_cfg.inter_level == "character" else [
            s + [syl_eos] for s in batch.syllables]
        for e in loss_cfg.tap_set:
            lp = model.inter_head(e, dec.taps[e])
            inter[e] = T.mean(ce_loss_batch(lp, targets, loss_cfg.label_smoothing))
    return combine(ctc, att, inter, loss_cfg)


@dataclass
class TrainState:
    step: int = 0
    best_dev: float = math.inf
    skipped_steps: int = 0
    dropped_utterances: int = 0
    nonfinite_streak: int = 0
    reached_target_step: int = None


class Trainer:
    def __init__(self, model_cfg, loss_cfg, train_cfg, char_vocab, syl_vocab, train_utts,
                 dev_utts=None, decode_cfg=None, log_path=None, checkpoint_dir=None):
        if not train_utts:
            raise DataError("training corpus is empty")
        if tuple(model_cfg.inter_taps) != tuple(loss_cfg.tap_set):
            raise ConfigError(f"model taps {model_cfg.inter_taps} != loss taps {loss_cfg.tap_set}")
        if loss_cfg.tap_set and model_cfg.inter_level != loss_cfg.inter_level:
            raise ConfigError("model and loss disagree on the InterCE level")
        if len(syl_vocab) != model_cfg.syllable_vocab_size or len(char_vocab) != model_cfg.char_vocab_size:
            raise ConfigError("vocabulary sizes do not match the model config")
        self.model_cfg, self.loss_cfg, self.cfg = model_cfg, loss_cfg, train_cfg
        self.decode_cfg = decode_cfg or DecodeConfig()
        self.char_vocab, self.syl_vocab = char_vocab, syl_vocab
        self.state = TrainState()
        kept = [u for u in train_utts if feasible(u)]
        self.state.dropped_utterances = len(train_utts) - len(kept)
        if self.state.dropped_utterances:
            log.warning("dropped %d utterances too short for their CTC labels", self.state.dropped_utterances)
        if not kept:
            raise DataError("no training utterance is long enough for its labels")
        self.train_utts = kept
        self.dev_utts = dev_utts
        self.batches = bucket_batches(kept, train_cfg.batch_size, train_cfg.max_frames_per_batch)
        self.model = MultiLevelASR(model_cfg, seed=train_cfg.seed)
        self.params = self.model.parameters()
        self.optimizer = Adam(self.params, train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
        self.scale = schedule_scale(train_cfg.peak_lr, model_cfg.attention_dim, train_cfg.warmup_steps)
        self.dropout_rng = T.CounterRNG(train_cfg.seed, STREAM_DROPOUT)
        self.history = []
        self.log_path = Path(log_path) if log_path else None
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self._t0 = time.perf_counter()

    def batch_for(self, step):
        count = len(self.batches)
        epoch, pos = divmod(step - 1, count)
        order = np.random.default_rng([self.cfg.seed, STREAM_SHUFFLE, epoch]).permutation(count)
        utts = self.batches[order[pos]]
        if self.cfg.spec_augment:
            return make_batch(utts, np.random.default_rng([self.cfg.seed, STREAM_AUGMENT, step]),
                              SpecAugmentPolicy())
        return make_batch(utts)

    def lr(self, step):
        return lr_schedule(step, self.model_cfg.attention_dim, self.cfg.warmup_steps, self.scale)

    def step(self):
        """Run one optimisation step and return its metrics record."""
        step = self.state.step + 1
        batch = self.batch_for(step)
        self.model.zero_grad()
        rng = self.dropout_rng.at_step(step) if self.model_cfg.dropout_rate > 0 else None
        lr = self.lr(step)
        record = {"step": step, "lr": lr}
        try:
            breakdown = forward_loss(self.model, batch, self.loss_cfg, self.syl_vocab.sos_eos,
                                     self.char_vocab.sos_eos, rng)
            values = breakdown.as_floats()
            if not math.isfinite(values["total"]):
                raise NumericError("non-finite loss")
        except NumericError as exc:
            self.state.nonfinite_streak += 1
            self.state.skipped_steps += 1
            self.state.step = step
            if self.state.nonfinite_streak >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(
                    f"loss non-finite for {self.state.nonfinite_streak} consecutive steps (last: {exc})"
                ) from exc
            record.update(skipped=True)
            return self._emit(record)
        self.state.nonfinite_streak = 0
        record.update(values)
        T.backward(breakdown.total)
        record["grad_norm"] = global_grad_norm(self.params)
        try:
            clip_gradients(self.params, self.cfg.grad_clip_norm)
        except NumericError:
            self.state.skipped_steps += 1
            self.state.step = step
            record.update(skipped=True)
            return self._emit(record)
        self.optimizer.step(lr)
        self.state.step = step
        return self._emit(record)

    def _emit(self, record):
        record["wall_time"] = round(time.perf_counter() - self._t0, 3)
        self.history.append(record)
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def evaluate(self, utts=None):
        report = evaluate(utts if utts is not None else self.dev_utts or self.train_utts,
                          self.model, self.decode_cfg, self.char_vocab, self.syl_vocab)
        return report

    def fit(self, max_steps=None):
        """Train until ``max_steps`` (or the target error rate is reached)."""
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        target = self.cfg.target_error_rate
        while self.state.step < max_steps:
            self.step()
            step = self.state.step
            if self.cfg.eval_interval and step % self.cfg.eval_interval == 0:
                if self._evaluate_and_track(step, target):
                    break
            if self.checkpoint_dir and self.cfg.checkpoint_interval and step % self.cfg.checkpoint_interval == 0:
                self.save(self.checkpoint_dir / f"step{step:06d}.ckpt")
        if self.checkpoint_dir:
            self.save(self.checkpoint_dir / "final.ckpt")
        return self.history

    def _evaluate_and_track(self, step, target):
        report = self.evaluate()
        summary = report.summary()
        self._emit({"step": step, "eval": summary})
        if summary["CER"] < self.state.best_dev:
            self.state.best_dev = summary["CER"]
            if self.checkpoint_dir:
                self.save(self.checkpoint_dir / "best.ckpt")
        if target is not None and summary["SUER"] < target and summary["CER"] < target:
            self.state.reached_target_step = step
            return True
        return False

    # -- persistence ----------------------------------------------------------
    def save(self, path):
        from .checkpoint import save_checkpoint

        Path(path).parent.mkdir(parents=True, exist_ok=True)
        blobs = dict(self.model.state_dict())
        names = [n for n, _ in self.model.named_parameters()]
        for name, m, v in zip(names, self.optimizer.m, self.optimizer.v):
            blobs[f"optimizer.m.{name}"] = m
            blobs[f"optimizer.v.{name}"] = v
        meta = {
            "loss_config": asdict(self.loss_cfg),
            "train_config": asdict(self.cfg),
            "decode_config": asdict(self.decode_cfg),
            "train_state": {**asdict(self.state),
                            "best_dev": None if math.isinf(self.state.best_dev) else self.state.best_dev},
            "optimizer_t": self.optimizer.t,
            "char_vocab": list(self.char_vocab.tokens),
            "syl_vocab": list(self.syl_vocab.tokens),
        }
        save_checkpoint(path, self.model_cfg, blobs, meta)

    def restore(self, path):
        """Load model, optimiser and counters from a checkpoint written by :meth:`save`."""
        from .checkpoint import load_checkpoint

        cfg, blobs, meta = load_checkpoint(path)
        if cfg != self.model_cfg:
            raise ConfigError("checkpoint model config differs from the trainer's")
        names = [n for n, _ in self.model.named_parameters()]
        self.model.load_state_dict({n: blobs[n] for n in names})
        self.optimizer.m = [blobs[f"optimizer.m.{n}"].astype(p.dtype) for n, p in zip(names, self.params)]
        self.optimizer.v = [blobs[f"optimizer.v.{n}"].astype(p.dtype) for n, p in zip(names, self.params)]
        self.optimizer.t = int(meta["optimizer_t"])
        state = dict(meta["train_state"])
        if state["best_dev"] is None:
            state["best_dev"] = math.inf
        self.state = TrainState(**state)
        return self


@dataclass
class TrainResult:
    model: MultiLevelASR
    history: list
    state: TrainState
    trainer: Trainer = field(repr=False, default=None)


def train(train_utts, model_cfg, loss_cfg, train_cfg, char_vocab, syl_vocab, dev_utts=None,
          decode_cfg=None, log_path=None, checkpoint_dir=None):
    trainer = Trainer(model_cfg, loss_cfg, train_cfg, char_vocab, syl_vocab, train_utts, dev_utts,
                      decode_cfg, log_path, checkpoint_dir)
    history = trainer.fit()
    return TrainResult(trainer.model, history, trainer.state, trainer)
