"""``mlasr``: generate a synthetic corpus, train, decode, re-score, self-test.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 bad data,
4 training diverged.  Log verbosity comes from ``MLASR_LOG_LEVEL``
(default INFO).
"""

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import ExperimentConfig
from .decode import EvalReport, edit_distance, evaluate
from .errors import ASRError, ConfigError, DataError, InputError, TrainingDiverged
from .frontend import SyntheticCorpusSpec, SyntheticWorld, generate_synthetic_corpus, read_corpus, write_corpus

log = logging.getLogger("multilevel_asr")

EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 1, 2, 3, 4


def set_threads(count):
    """0 leaves the BLAS pool alone; N >= 1 caps it (1 gives bitwise-reproducible runs)."""
    if count < 0:
        raise ConfigError("--threads must be >= 0")
    if count == 0:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(count)
        log.debug("threadpoolctl unavailable; set thread env vars to %d", count)
        return None
    return threadpool_limits(limits=count)


def _emit_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=list))


# -- gen-corpus ---------------------------------------------------------------


def cmd_gen_corpus(args):
    spec = SyntheticCorpusSpec(
        num_utterances=args.num_train,
        syllable_vocab_size=args.syllables,
        character_vocab_size=args.chars,
        noise_stddev=args.noise,
        seed=args.seed or 0,
    )
    out = Path(args.output)
    plan = {"output": str(out), "spec": asdict(spec), "num_dev": args.num_dev}
    if args.dry_run:
        _emit_json(plan)
        return 0
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    world = SyntheticWorld.from_spec(spec)
    splits = {"train": generate_synthetic_corpus(spec)}
    if args.num_dev:
        splits["dev"] = generate_synthetic_corpus(replace(spec, num_utterances=args.num_dev),
                                                  first_index=args.num_train)
    write_corpus(out, splits, world.lexicon, world.char_vocab, world.syl_vocab)
    for name in splits:
        read_corpus(out, name)
    log.info("wrote %s", ", ".join(f"{len(u)} {n}" for n, u in splits.items()))
    return 0


# -- train ----------------------------------------------------------------------


def _experiment(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    for flag, key in (("corpus", "data.corpus"), ("output", "data.output")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    return ExperimentConfig.load(args.config, overrides)


def cmd_train(args):
    from .trainer import Trainer

    exp = _experiment(args)
    if args.dry_run:
        _emit_json(exp.resolved())
        return 0
    data = exp.data
    corpus = read_corpus(data.corpus, data.train_split)
    dev = None
    if data.eval_split != data.train_split:
        if (Path(data.corpus) / f"{data.eval_split}.tsv").exists():
            dev = read_corpus(data.corpus, data.eval_split).utterances
        else:
            log.warning("no %s split in %s; evaluating on the training set", data.eval_split, data.corpus)
    model_cfg = exp.model_config(len(corpus.syl_vocab), len(corpus.char_vocab))
    out = Path(data.output)
    metrics = out / "metrics.jsonl"
    if metrics.exists() and not args.resume:
        if not args.force:
            raise ConfigError(f"{out} already holds a run; pass --resume CKPT or --force")
        metrics.unlink()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(exp.to_json() + "\n", encoding="utf-8")
    trainer = Trainer(model_cfg, exp.loss, exp.train, corpus.char_vocab, corpus.syl_vocab,
                      corpus.utterances, dev, exp.decode, log_path=metrics, checkpoint_dir=out)
    if args.resume:
        trainer.restore(args.resume)
        log.info("resumed from %s at step %d", args.resume, trainer.state.step)
    history = trainer.fit()
    losses = [r["total"] for r in history if "total" in r]
    summary = {"steps": trainer.state.step, "skipped_steps": trainer.state.skipped_steps,
               "final_loss": losses[-1] if losses else None,
               "checkpoint": str(out / "final.ckpt")}
    if trainer.state.reached_target_step is not None:
        summary["reached_target_step"] = trainer.state.reached_target_step
    _emit_json(summary)
    return 0


# -- decode / eval ----------------------------------------------------------------


def cmd_decode(args):
    from .checkpoint import load_model
    from .decode import DecodeConfig

    config = DecodeConfig(beam_size=args.beam_size, ctc_weight=args.ctc_weight)
    report_path = Path(args.report) if args.report else Path(args.checkpoint).with_name(f"report_{args.split}.tsv")
    if args.dry_run:
        _emit_json({"checkpoint": args.checkpoint, "corpus": args.corpus, "split": args.split,
                    "decode": asdict(config), "report": str(report_path)})
        return 0
    model, meta = load_model(args.checkpoint)
    corpus = read_corpus(args.corpus, args.split)
    for key, vocab in (("char_vocab", corpus.char_vocab), ("syl_vocab", corpus.syl_vocab)):
        stored = (meta or {}).get(key)
        if stored is not None and tuple(stored) != vocab.tokens:
            raise ConfigError(f"corpus {key.replace('_', ' ')} differs from the one the checkpoint was trained on")
    report = evaluate(corpus.utterances, model, config, corpus.char_vocab, corpus.syl_vocab)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_text(), encoding="utf-8")
    summary = report.summary()
    report_path.with_suffix(".json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
    _emit_json(summary)
    return 0


def recheck_report(text):
    """Recompute a report's totals from its per-utterance lines.

    Returns (summary, problems): ``problems`` lists every line whose stored
    error count disagrees with a fresh alignment, plus any footer mismatch.
    """
    report = EvalReport.from_text(text)
    problems = []
    for u in report.utterances:
        syl = sum(edit_distance(u.ref_syllables, u.hyp_syllables))
        chars = sum(edit_distance(u.ref_characters, u.hyp_characters))
        if (syl, chars) != (u.syllable_errors, u.char_errors):
            problems.append(f"{u.id}: stored errors ({u.syllable_errors}, {u.char_errors}) "
                            f"!= recomputed ({syl}, {chars})")
    summary = report.summary()
    for line in text.splitlines():
        if line.startswith("# summary "):
            stored = json.loads(line[len("# summary "):])
            if stored != summary:
                problems.append(f"footer summary {stored} != recomputed {summary}")
    return summary, problems


def cmd_eval(args):
    path = Path(args.report)
    if args.dry_run:
        _emit_json({"report": str(path)})
        return 0
    if not path.exists():
        raise DataError(f"report {path} not found")
    summary, problems = recheck_report(path.read_text(encoding="utf-8"))
    for p in problems:
        log.error(p)
    _emit_json(summary)
    return EXIT_FAILED if problems else 0


def cmd_selftest(args):
    from .selftest import run_selftest

    if args.dry_run:
        _emit_json({"suites": ["gradients", "ctc-oracle", "beam-oracle", "edit-distance-oracle"],
                    "seed": args.seed or 0})
        return 0
    return 0 if run_selftest(args.seed or 0) else EXIT_FAILED


# -- argument parsing -------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root seed for every random stream")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads: 0 = library default, 1 = deterministic")
    common.add_argument("--dry-run", action="store_true", help="print the resolved settings and exit")

    parser = argparse.ArgumentParser(prog="mlasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="write a synthetic feature corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--num-train", type=int, default=64)
    p.add_argument("--num-dev", type=int, default=16)
    p.add_argument("--syllables", type=int, default=12)
    p.add_argument("--chars", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train", parents=[common], help="train a model",
                       epilog="Any --section.key=value argument overrides the config file.")
    p.add_argument("--config", default=None, help="JSON experiment config")
    p.add_argument("--corpus", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--force", action="store_true", help="overwrite an existing run in --output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="decode a corpus split and score it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="dev")
    p.add_argument("--beam-size", type=int, default=10)
    p.add_argument("--ctc-weight", type=float, default=0.5)
    p.add_argument("--report", default=None, help="report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="recompute totals from a decode report")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def _split_overrides(extra):
    """Turn leftover ``--section.key=value`` / ``--section.key value`` args into ``section.key=value``."""
    out, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise ConfigError(f"unrecognized argument {arg!r}")
        if "=" in arg:
            out.append(arg[2:])
            i += 1
        elif i + 1 < len(extra):
            out.append(f"{arg[2:]}={extra[i + 1]}")
            i += 2
        else:
            raise ConfigError(f"override {arg!r} has no value")
    return out


def main(argv=None):
    logging.basicConfig(level=os.environ.get("MLASR_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if extra and args.command != "train":
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        args.overrides = _split_overrides(extra) if extra else []
        limiter = set_threads(args.threads)
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, InputError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except ASRError as exc:
        log.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
