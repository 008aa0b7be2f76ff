"""Training objectives: syllable CTC, label-smoothed CE, intermediate CE and their mix.

The combined objective is

    total = alpha * ctc + beta * mean_e(inter_e) + (1 - alpha - beta) * att

and reduces to ``alpha * ctc + (1 - alpha) * att`` when ``beta == 0``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InfeasibleError, ShapeError

INTER_MODES = {
    "I1": ((2, 4), "syllable"),
    "I2": ((2, 4), "character"),
    "I3": ((3,), "syllable"),
    "I4": ((3,), "character"),
}
DEFAULT_INTER_BETA = 0.4


@dataclass
class LossConfig:
    """Objective weights.

    ``inter_mode`` ("none", "I1".."I4") fills in ``tap_set``/``inter_level``
    unless they are given explicitly; ``beta`` defaults to 0.4 with taps and
    0 without.  ``beta == 0`` always means no taps.
    """

    alpha: float = 0.1
    beta: float = None
    inter_mode: str = "none"
    tap_set: tuple = None
    inter_level: str = None
    label_smoothing: float = 0.1

    def __post_init__(self):
        mode = self.inter_mode or "none"
        if mode != "none" and mode not in INTER_MODES:
            raise ConfigError(f"inter_mode must be one of none, I1..I4; got {mode!r}")
        taps, level = INTER_MODES.get(mode, ((), "syllable"))
        if self.tap_set is not None:
            taps = tuple(self.tap_set)
        if self.inter_level is not None:
            level = self.inter_level
        if self.beta is None:
            self.beta = DEFAULT_INTER_BETA if taps else 0.0
        if self.beta == 0:
            taps = ()
        self.tap_set = tuple(sorted(set(int(e) for e in taps)))
        self.inter_level = level
        if level not in ("syllable", "character"):
            raise ConfigError(f"inter_level must be 'syllable' or 'character', got {level!r}")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"alpha={self.alpha}, beta={self.beta} must lie in [0, 1]")
        if self.alpha + self.beta > 1.0 + 1e-12:
            raise ConfigError(f"alpha + beta = {self.alpha + self.beta} exceeds 1")
        if bool(self.tap_set) != (self.beta > 0):
            raise ConfigError("tap_set must be non-empty exactly when beta > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")

    @property
    def k(self):
        return len(self.tap_set)

    @property
    def weights(self):
        """(ctc weight, per-tap weight, attention weight)."""
        if self.beta == 0:
            return self.alpha, 0.0, 1.0 - self.alpha
        return self.alpha, self.beta / self.k, 1.0 - self.alpha - self.beta


@dataclass
class LossBreakdown:
    total: T.Tensor
    ctc: T.Tensor
    att: T.Tensor
    inter: dict = field(default_factory=dict)

    def as_floats(self):
        out = {"total": float(self.total.item()), "ctc": float(self.ctc.item()),
               "att": float(self.att.item())}
        out.update({f"inter_{e}": float(v.item()) for e, v in sorted(self.inter.items())})
        return out


# -- CTC --------------------------------------------------------------------


def ctc_min_frames(labels):
    """Frames needed to emit ``labels``: one per label plus a blank between repeats."""
    labels = list(labels)
    return len(labels) + sum(a == b for a, b in zip(labels, labels[1:]))


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _ctc_forward_backward(lp, lengths, labels, blank):
    """Log-space alpha/beta recursions, vectorised over the batch.

    lp: (B, T, V) float64.  Returns (log-likelihood (B,), d loglik / d lp).
    """
    batch, steps, vocab = lp.shape
    max_len = max((len(lab) for lab in labels), default=0)
    states = 2 * max_len + 1
    ext = np.full((batch, states), blank, dtype=np.int64)
    num_states = np.empty(batch, dtype=np.int64)
    for b, lab in enumerate(labels):
        ext[b, 1:2 * len(lab):2] = lab
        num_states[b] = 2 * len(lab) + 1
    skip = np.zeros((batch, states), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (batch, steps, states)), axis=2)
    neg = -np.inf
    rows = np.arange(batch)

    alpha = np.full((steps, batch, states), neg)
    alpha[0, :, 0] = emit[:, 0, 0]
    if states > 1:
        alpha[0, :, 1] = np.where(num_states > 1, emit[:, 0, 1], neg)
    for t in range(1, steps):
        prev = alpha[t - 1]
        padded = np.concatenate([np.full((batch, 2), neg), prev], axis=1)
        shift1 = padded[:, 1:states + 1]
        shift2 = np.where(skip, padded[:, :states], neg)
        alpha[t] = _lse3(prev, shift1, shift2) + emit[:, t]

    last = lengths - 1
    end = alpha[last, rows]
    final = end[rows, num_states - 1]
    final_other = np.where(num_states > 1, end[rows, np.maximum(num_states - 2, 0)], neg)
    loglik = np.logaddexp(final, final_other)

    # beta[t, s]: log-prob of frames t+1.. given state s at frame t (emission at t excluded)
    init = np.full((batch, states), neg)
    init[rows, num_states - 1] = 0.0
    several = num_states > 1
    init[rows[several], num_states[several] - 2] = 0.0
    beta = np.full((steps, batch, states), neg)
    skip_next = np.concatenate([skip, np.zeros((batch, 2), dtype=bool)], axis=1)[:, 2:]
    for t in range(steps - 1, -1, -1):
        if t < steps - 1:
            nxt = beta[t + 1] + emit[:, t + 1]
            padded = np.concatenate([nxt, np.full((batch, 2), neg)], axis=1)
            ahead1 = padded[:, 1:states + 1]
            ahead2 = np.where(skip_next, padded[:, 2:states + 2], neg)
            beta[t] = _lse3(nxt, ahead1, ahead2)
        beta[t] = np.where((t == last)[:, None], init, beta[t])
        beta[t] = np.where((t > last)[:, None], neg, beta[t])

    occupancy = np.exp(alpha + beta - loglik[None, :, None])  # (T, B, S)
    occupancy = np.nan_to_num(occupancy, nan=0.0)
    grad = np.zeros((batch, steps, vocab))
    t_idx = np.arange(steps)[:, None, None]
    b_idx = rows[None, :, None]
    np.add.at(grad, (np.broadcast_to(b_idx, occupancy.shape),
                     np.broadcast_to(t_idx, occupancy.shape),
                     np.broadcast_to(ext[None], occupancy.shape)), occupancy)
    return loglik, grad


def ctc_loss_batch(log_probs, lengths, labels, blank=0):
    """Per-utterance CTC negative log-likelihood, shape (B,).

    log_probs: (B, T', V) Tensor; lengths: valid frames per row; labels: id lists.
    """
    lp = log_probs.data
    if lp.ndim != 3 or len(labels) != lp.shape[0]:
        raise ShapeError(f"ctc_loss_batch: log_probs {lp.shape} vs {len(labels)} label sequences")
    lengths = np.asarray(lengths, dtype=np.int64)
    for n, lab in zip(lengths, labels):
        if blank in lab:
            raise ContractError("CTC labels must not contain the blank id")
        need = ctc_min_frames(lab)
        if n < max(need, 1):
            raise InfeasibleError(int(n), need)
    loglik, grad = _ctc_forward_backward(lp.astype(np.float64), lengths, [list(l) for l in labels], blank)
    out = (-loglik).astype(lp.dtype)
    grad = grad.astype(lp.dtype)

    def back(g):
        return (-grad * g[:, None, None],)

    return T.Tensor.from_op(out, (log_probs,), back)


def ctc_loss(log_probs, labels, blank=0):
    """-log P_ctc(labels | log_probs) for one utterance; log_probs: (T', V)."""
    if log_probs.ndim != 2:
        raise ShapeError(f"ctc_loss expects (T', V) log-probs, got {log_probs.shape}")
    batched = T.reshape(log_probs, (1,) + log_probs.shape)
    return T.reshape(ctc_loss_batch(batched, [log_probs.shape[0]], [labels], blank), ())


# -- cross entropy ----------------------------------------------------------


def smoothed_targets(targets, vocab, smoothing, dtype=np.float64):
    q = np.full((len(targets), vocab), smoothing / (vocab - 1), dtype=dtype)
    q[np.arange(len(targets)), targets] = 1.0 - smoothing
    return q


def ce_loss_batch(log_probs, targets, smoothing=0.0):
    """Label-smoothed cross entropy averaged over each row's target positions, shape (B,).

    log_probs: (B, U, V) Tensor; targets: list of id lists, row b uses the first
    len(targets[b]) positions.
    """
    lp = log_probs.data
    batch, steps, vocab = lp.shape
    if len(targets) != batch:
        raise ContractError(f"ce_loss: {len(targets)} target rows for batch of {batch}")
    weights = np.zeros(lp.shape, dtype=lp.dtype)
    for b, tgt in enumerate(targets):
        if len(tgt) > steps:
            raise ContractError(f"ce_loss: {len(tgt)} targets but only {steps} positions")
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
            raise ContractError(f"ce_loss: target id outside [0, {vocab})")
        if tgt.size:
            weights[b, :len(tgt)] = smoothed_targets(tgt, vocab, smoothing, lp.dtype) / len(tgt)
    out = -(weights * lp).sum(axis=(1, 2))
    return T.Tensor.from_op(out, (log_probs,), lambda g: (-weights * g[:, None, None],))


def ce_loss(log_probs, targets, smoothing=0.0):
    """Mean over positions of -sum_v q_v log p_v with the smoothed target q."""
    if log_probs.ndim != 2 or log_probs.shape[0] != len(targets):
        raise ContractError(f"ce_loss: log_probs {log_probs.shape} vs {len(targets)} targets")
    batched = T.reshape(log_probs, (1,) + log_probs.shape)
    return T.reshape(ce_loss_batch(batched, [list(targets)], smoothing), ())


def inter_ce_loss(tap_log_probs, config, syllable_targets, char_targets):
    """One smoothed CE per tap layer.

    ``syllable_targets``/``char_targets`` are the per-row target lists already
    ending in eos; ``config.inter_level`` picks which one the taps learn.
    Each value has shape (B,) for batched tap outputs or () for a single row.
    """
    if set(tap_log_probs) != set(config.tap_set):
        raise ContractError(f"taps {sorted(tap_log_probs)} do not match configured {list(config.tap_set)}")
    targets = syllable_targets if config.inter_level == "syllable" else char_targets
    sample = next(iter(tap_log_probs.values()), None)
    loss_fn = ce_loss_batch if sample is not None and sample.ndim == 3 else ce_loss
    return {e: loss_fn(lp, targets, config.label_smoothing) for e, lp in sorted(tap_log_probs.items())}


def combine(ctc, att, inter, config):
    """Mix scalar component losses into a :class:`LossBreakdown`."""
    if set(inter) != set(config.tap_set):
        raise ContractError(f"inter losses for {sorted(inter)} but taps are {list(config.tap_set)}")
    alpha, beta = config.alpha, config.beta
    if alpha + beta > 1.0 + 1e-12:
        raise ConfigError(f"alpha + beta = {alpha + beta} exceeds 1")
    if beta == 0:
        total = T.scale(ctc, alpha) + T.scale(att, 1.0 - alpha)
    else:
        mean_inter = None
        for e in sorted(inter):
            mean_inter = inter[e] if mean_inter is None else mean_inter + inter[e]
        mean_inter = T.scale(mean_inter, 1.0 / config.k)
        total = T.scale(ctc, alpha) + T.scale(mean_inter, beta) + T.scale(att, 1.0 - alpha - beta)
    return LossBreakdown(total, ctc, att, dict(inter))
