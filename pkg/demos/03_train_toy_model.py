"""
Training the two-level model on a synthetic corpus
==================================================

The encoder learns syllables through CTC, the decoder turns syllables into
characters, and one intermediate decoder layer gets its own syllable
cross-entropy.  Homophones in the corpus mean the character for a syllable
depends on its neighbours, so the decoder has real work to do.

Roughly a minute on one CPU core.
"""

import sys

from multilevel_asr.decode import DecodeConfig
from multilevel_asr.frontend import SyntheticCorpusSpec, SyntheticWorld, generate_synthetic_corpus
from multilevel_asr.losses import LossConfig
from multilevel_asr.model import ModelConfig
from multilevel_asr.trainer import TrainConfig, Trainer

arch = sys.argv[1] if len(sys.argv) > 1 else "transformer"

spec = SyntheticCorpusSpec()
world = SyntheticWorld.from_spec(spec)
train = generate_synthetic_corpus(spec)
print(f"{len(train)} utterances, {len(world.syl_vocab)} syllable ids, {len(world.char_vocab)} character ids")
for syl, chars in sorted(world.homophones.items()):
    if len(chars) > 1:
        print(f"  homophones for {syl}: {' '.join(chars)}")

# CTC weight 0.1, InterCE on decoder layer 3 at syllable level (beta defaults to 0.4)
loss = LossConfig(alpha=0.1, inter_mode="I3")
model_cfg = ModelConfig.toy(len(world.syl_vocab), len(world.char_vocab), arch=arch,
                            inter_taps=loss.tap_set, inter_level=loss.inter_level)
trainer = Trainer(model_cfg, loss, TrainConfig.toy(eval_interval=100, target_error_rate=0.05),
                  world.char_vocab, world.syl_vocab, train, decode_cfg=DecodeConfig(beam_size=10))
print(f"{arch}: {trainer.model.num_parameters():,} parameters, weights (ctc, inter, att) = {loss.weights}")

trainer.fit()
for rec in trainer.history:
    if "eval" in rec:
        e = rec["eval"]
        print(f"step {rec['step']:>5}  SUER {e['SUER']:6.1%}  CER {e['CER']:6.1%}")
    elif rec["step"] % 50 == 0:
        print(f"step {rec['step']:>5}  loss {rec['total']:.3f}  ctc {rec['ctc']:.3f}  "
              f"inter {rec['inter_3']:.3f}  att {rec['att']:.3f}  lr {rec['lr']:.2e}")

report = trainer.evaluate()
print("\nfirst decodes:")
for u in report.utterances[:3]:
    print(f"  ref {' '.join(u.ref_syllables):<40} | {''.join(u.ref_characters)}")
    print(f"  hyp {' '.join(u.hyp_syllables):<40} | {''.join(u.hyp_characters)}")
