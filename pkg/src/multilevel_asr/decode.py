"""Inference: CTC prefix beam search over syllables, one-pass decoder conversion
to characters, CTC/attention score fusion, and SUER/CER scoring.

All scores are natural-log probabilities.  Ties are broken by the
lexicographic order of the syllable id sequence.
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

NEG_INF = float("-inf")


def log_add(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


@dataclass
class DecodeConfig:
    beam_size: int = 10
    ctc_weight: float = 0.5
    max_output_length: int = 200

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError(f"beam_size must be >= 1, got {self.beam_size}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if self.max_output_length < 0:
            raise ConfigError("max_output_length must be >= 0")


@dataclass
class Hypothesis:
    syllables: tuple
    log_p_blank: float
    log_p_nonblank: float
    characters: list = None
    attention_score: float = None
    combined_score: float = None

    @property
    def ctc_score(self):
        return log_add(self.log_p_blank, self.log_p_nonblank)


def _rank(items):
    return sorted(items, key=lambda kv: (-log_add(*kv[1]), kv[0]))


def ctc_prefix_beam_search(log_probs, config=None, blank=0):
    """Best ``beam_size`` collapsed prefixes, each with blank/non-blank-ending mass.

    Per frame only the ``beam_size`` most likely symbols are expanded, so a
    beam at least as wide as the number of reachable prefixes (and the
    vocabulary) yields exact prefix probabilities.
    """
    config = config or DecodeConfig()
    lp = log_probs.data if isinstance(log_probs, T.Tensor) else np.asarray(log_probs)
    lp = np.asarray(lp, dtype=np.float64)
    beam = config.beam_size
    vocab = lp.shape[1]
    beams = [((), (0.0, NEG_INF))]
    for row in lp:
        if beam < vocab:
            top = np.argsort(-row, kind="stable")[:beam]
            candidates = [(int(s), float(row[s])) for s in sorted(top)]
        else:
            candidates = list(enumerate(row.tolist()))
        nxt = {}
        for prefix, (pb, pnb) in beams:
            last = prefix[-1] if prefix else None
            for s, p in candidates:
                if s == blank:
                    nb, nnb = nxt.get(prefix, (NEG_INF, NEG_INF))
                    nxt[prefix] = (log_add(nb, log_add(pb, pnb) + p), nnb)
                    continue
                ext = prefix + (s,)
                nb, nnb = nxt.get(ext, (NEG_INF, NEG_INF))
                if s == last:
                    nxt[ext] = (nb, log_add(nnb, pb + p))
                    sb, snb = nxt.get(prefix, (NEG_INF, NEG_INF))
                    nxt[prefix] = (sb, log_add(snb, pnb + p))
                else:
                    nxt[ext] = (nb, log_add(nnb, log_add(pb, pnb) + p))
        beams = _rank((k, v) for k, v in nxt.items() if v != (NEG_INF, NEG_INF))[:beam]
    return [Hypothesis(prefix, pb, pnb) for prefix, (pb, pnb) in beams]


def attention_rescore(hypotheses, enc, model, config, syl_sos, char_eos):
    """Convert each syllable hypothesis to characters in one decoder pass and re-rank.

    ``enc`` is the EncoderOutput of a single utterance (batch of one).
    Characters are the per-position argmax (sos/eos excluded); the attention
    score adds the log-probability of eos after the last syllable.
    """
    if not hypotheses:
        return []
    hyps = []
    for hyp in hypotheses:
        if len(hyp.syllables) > config.max_output_length:
            log.warning("truncating hypothesis of length %d to %d", len(hyp.syllables),
                        config.max_output_length)
            hyp = Hypothesis(hyp.syllables[:config.max_output_length], hyp.log_p_blank, hyp.log_p_nonblank)
        hyps.append(hyp)
    count = len(hyps)
    width = max(len(h.syllables) for h in hyps) + 1
    inputs = np.full((count, width), syl_sos, dtype=np.int64)
    for i, h in enumerate(hyps):
        inputs[i, 1:len(h.syllables) + 1] = h.syllables
    lengths = np.array([len(h.syllables) + 1 for h in hyps])
    with T.no_grad():
        shared = type(enc)(T.Tensor(np.broadcast_to(enc.h_enc.data, (count,) + enc.h_enc.shape[1:]),
                                    dtype=enc.h_enc.dtype),
                           np.repeat(enc.lengths, count))
        out = model.decode_step(shared, inputs, lengths)
        char_lp = model.char_head(out.h_dec_final).data.astype(np.float64)
    vocab = char_lp.shape[-1]
    allowed = np.ones(vocab, dtype=bool)
    allowed[char_eos] = False
    lam = config.ctc_weight
    ranked = []
    for i, h in enumerate(hyps):
        n = len(h.syllables)
        rows = char_lp[i, :n]
        masked = np.where(allowed, rows, -np.inf)
        chars = masked.argmax(axis=1).tolist() if n else []
        score = float(rows[np.arange(n), chars].sum()) + float(char_lp[i, n, char_eos])
        combined = lam * h.ctc_score + (1.0 - lam) * score
        ranked.append(Hypothesis(h.syllables, h.log_p_blank, h.log_p_nonblank, chars, score, combined))
    ranked.sort(key=lambda h: (-h.combined_score, h.syllables))
    return ranked


def edit_distance(ref, hyp):
    """Levenshtein alignment with unit costs; returns (substitutions, insertions, deletions)."""
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dist[i, j] = min(dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                             dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    subs = ins = dels = 0
    i, j = n, m
    while i or j:
        if i and j and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            subs += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(subs), ins, dels


def error_rate(ref, hyp):
    """(S + I + D) / len(ref).

    An empty reference gives 0 for an empty hypothesis and len(hyp) otherwise
    (every hypothesis token counts as one insertion over a unit reference).
    """
    errors = sum(edit_distance(ref, hyp))
    return errors / len(ref) if ref else float(len(hyp))


@dataclass
class UtteranceResult:
    id: str
    ref_syllables: list
    hyp_syllables: list
    ref_characters: list
    hyp_characters: list
    ctc_score: float
    attention_score: float
    combined_score: float
    syllable_errors: int
    char_errors: int


@dataclass
class EvalReport:
    utterances: list = field(default_factory=list)

    @property
    def syllable_errors(self):
        return sum(u.syllable_errors for u in self.utterances)

    @property
    def syllable_total(self):
        return sum(len(u.ref_syllables) for u in self.utterances)

    @property
    def char_errors(self):
        return sum(u.char_errors for u in self.utterances)

    @property
    def char_total(self):
        return sum(len(u.ref_characters) for u in self.utterances)

    @property
    def suer(self):
        return self.syllable_errors / max(self.syllable_total, 1)

    @property
    def cer(self):
        return self.char_errors / max(self.char_total, 1)

    def summary(self):
        return {
            "num_utterances": len(self.utterances),
            "syllable_errors": self.syllable_errors,
            "syllable_total": self.syllable_total,
            "char_errors": self.char_errors,
            "char_total": self.char_total,
            "SUER": self.suer,
            "CER": self.cer,
        }

    def to_text(self):
        lines = ["# id\tref_syllables\thyp_syllables\tref_characters\thyp_characters"
                 "\tctc_score\tattention_score\tcombined_score\tsyllable_errors\tchar_errors"]
        for u in self.utterances:
            lines.append("\t".join([
                u.id, " ".join(u.ref_syllables), " ".join(u.hyp_syllables),
                " ".join(u.ref_characters), " ".join(u.hyp_characters),
                f"{u.ctc_score:.6f}", f"{u.attention_score:.6f}", f"{u.combined_score:.6f}",
                str(u.syllable_errors), str(u.char_errors),
            ]))
        s = self.summary()
        lines.append(f"# SUER {100 * s['SUER']:.2f}% ({s['syllable_errors']}/{s['syllable_total']})")
        lines.append(f"# CER {100 * s['CER']:.2f}% ({s['char_errors']}/{s['char_total']})")
        lines.append("# summary " + json.dumps(s, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Rebuild the per-utterance records (scores and error counts) from :meth:`to_text`."""
        report = cls()
        for line in text.splitlines():
            if not line or line.startswith("#"):
                continue
            f = line.split("\t")
            if len(f) != 10:
                raise DataError(f"malformed report line: {line!r}")
            report.utterances.append(UtteranceResult(
                f[0], f[1].split(), f[2].split(), f[3].split(), f[4].split(),
                float(f[5]), float(f[6]), float(f[7]), int(f[8]), int(f[9])))
        return report


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def evaluate(utterances, model, config, char_vocab, syl_vocab, batch_size=16):
    """Decode every utterance and score syllables (SUER) and characters (CER)."""
    cfg = model.cfg
    if len(syl_vocab) != cfg.syllable_vocab_size or len(char_vocab) != cfg.char_vocab_size:
        raise ConfigError(
            f"corpus vocabularies ({len(syl_vocab)} syllables, {len(char_vocab)} characters) do not "
            f"match the model ({cfg.syllable_vocab_size}, {cfg.char_vocab_size})"
        )
    report = EvalReport()
    for chunk in _batches(list(utterances), batch_size):
        lengths = np.array([u.num_frames for u in chunk])
        feats = np.zeros((len(chunk), lengths.max(), chunk[0].features.shape[1]), dtype=T.get_default_dtype())
        for i, u in enumerate(chunk):
            feats[i, :u.num_frames] = u.features
        with T.no_grad():
            enc = model.encode(feats, lengths)
            ctc_lp = model.ctc_head(enc.h_enc).data
        for i, u in enumerate(chunk):
            n_frames = int(enc.lengths[i])
            hyps = ctc_prefix_beam_search(ctc_lp[i, :n_frames], config, blank=syl_vocab.blank)
            single = type(enc)(T.Tensor(enc.h_enc.data[i:i + 1, :n_frames], dtype=enc.h_enc.dtype),
                               np.array([n_frames]))
            best = attention_rescore(hyps, single, model, config, syl_vocab.sos_eos, char_vocab.sos_eos)[0]
            ref_syl, ref_chr = syl_vocab.decode(u.syllables), char_vocab.decode(u.characters)
            hyp_syl, hyp_chr = syl_vocab.decode(best.syllables), char_vocab.decode(best.characters)
            report.utterances.append(UtteranceResult(
                u.id, ref_syl, hyp_syl, ref_chr, hyp_chr,
                best.ctc_score, best.attention_score, best.combined_score,
                sum(edit_distance(ref_syl, hyp_syl)), sum(edit_distance(ref_chr, hyp_chr)),
            ))
    return report
