"""Command-line entry point wiring all modules into batch workflows.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import SynthConfig, read_feature_file, stack_frames, synth_corpus
from .errors import DataFormatError, NumericError, UsageError
from .evaluate import decode_utterance, dump_posteriors, evaluate_manifest
from .gradcheck import TOLERANCE, run_suite
from .report import write_eval_report
from .trainer import (
    PipelineConfig,
    apply_config_values,
    load_checkpoint,
    load_training_config,
    parse_kv_file,
    run_pipeline,
    run_stage,
)


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of calling sys.exit(2)."""

    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for key, kind, doc in [
        ("stage", str, "teacher-ctc | distill-kl | finetune-ctc"),
        ("train-manifest", str, "training manifest path"),
        ("dev-manifest", str, "dev manifest path"),
        ("out", str, "output directory for checkpoints and reports"),
        ("seed", int, "master random seed"),
        ("layers", int, "recurrent layers"),
        ("cells", int, "cells per layer"),
        ("projection", int, "projected dimension"),
        ("feature-dim", int, "feature dimension before stacking"),
        ("stack-factor", int, "frames concatenated per step"),
        ("learning-rate", float, "initial per-sample learning rate"),
        ("momentum", float, "momentum coefficient"),
        ("lr-decay", float, "decay factor on dev degradation"),
        ("lr-floor", float, "stop once the rate falls below this"),
        ("max-epochs", int, "epoch budget"),
        ("alpha", float, "label smoothing weight"),
        ("curriculum", str, "none | short-first | reduced-labels"),
        ("curriculum-epochs", int, "epochs in the easy phase"),
        ("curriculum-percentile", float, "length percentile for short-first"),
        ("grad-clip", float, "global gradient norm clip"),
        ("workers", int, "parallel utterances per update"),
        ("teacher-checkpoint", str, "teacher checkpoint for distill-kl"),
        ("init-checkpoint", str, "warm-start checkpoint"),
    ]:
        p.add_argument(f"--{key}", type=kind, default=None, help=doc)


def _collect_overrides(args) -> dict:
    """Flag values (kebab-case) plus --set pairs, as config-key strings."""
    flag_to_key = {
        "out": "out_dir",
    }
    overrides = {}
    for name, value in vars(args).items():
        if name in ("command", "config", "set", "func") or value is None:
            continue
        if name in ("checkpoint", "manifest", "unit", "features", "out_csv"):
            continue
        key = flag_to_key.get(name, name)
        overrides[key] = value
    for pair in args.set if hasattr(args, "set") else []:
        if "=" not in pair:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        key, _, value = pair.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def _cmd_synth_data(args) -> int:
    cfg = SynthConfig()
    if args.config:
        apply_config_values(cfg, parse_kv_file(args.config))
    for key, value in [
        ("utterance_count", args.utterances), ("proto_dim", args.proto_dim),
        ("noise_stddev", args.noise), ("seed", args.seed),
    ]:
        if value is not None:
            setattr(cfg, key, value)
    if args.frames_min is not None or args.frames_max is not None:
        lo, hi = cfg.frames_per_char
        cfg.frames_per_char = (args.frames_min or lo, args.frames_max or hi)
    if args.words_min is not None or args.words_max is not None:
        lo, hi = cfg.words_per_utt
        cfg.words_per_utt = (args.words_min or lo, args.words_max or hi)
    if args.words is not None:
        cfg.words = tuple(w for w in args.words.split(",") if w)
    manifest = synth_corpus(cfg, args.out)
    print(manifest)
    return 0


def _cmd_train(args) -> int:
    overrides = _collect_overrides(args)
    cfg = load_training_config(args.config, overrides)
    ckpt_path = Path(cfg.out_dir) / cfg.default_checkpoint_name()
    _, report = run_stage(cfg)
    last = report.entries[-1]
    print(f"{cfg.stage}: {last.epoch} epochs, dev loss {last.dev_loss:.6f}, "
          f"checkpoint {ckpt_path}")
    return 0


def _cmd_pipeline(args) -> int:
    overrides = _collect_overrides(args)
    pipeline = PipelineConfig.from_file(args.config, overrides)
    summary = run_pipeline(pipeline)
    for name in ("teacher", "distill", "finetune"):
        cfg = getattr(pipeline, name)
        path = Path(cfg.out_dir) / cfg.default_checkpoint_name()
        state = "resumed" if name in summary.resumed else "trained"
        print(f"{cfg.stage}: {state}, checkpoint {path}")
    return 0


def _cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    from .corpus import load_manifest

    for rec in load_manifest(args.manifest):
        hyp = decode_utterance(ckpt.model, read_feature_file(rec.feature_path),
                               ckpt.stack_factor)
        print(f"{rec.utt_id}\t{hyp}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    result = evaluate_manifest(ckpt.model, args.manifest, args.unit, ckpt.stack_factor)
    label = "WER" if args.unit == "word" else "CER"
    totals = result.counts
    rate = f"{100.0 * totals.rate:.2f}%" if totals.reference_count else "undefined"
    print(f"{label} {rate} (S={totals.substitutions} D={totals.deletions} "
          f"I={totals.insertions} N={totals.reference_count})")
    if args.out:
        paths = write_eval_report(args.out, f"eval_{args.unit}", result,
                                  config_text=f"checkpoint = {args.checkpoint}\n"
                                              f"manifest = {args.manifest}\n"
                                              f"unit = {args.unit}")
        print(f"report written to {paths[0]} / {paths[1]}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(args.seed if args.seed is not None else 0)
    failed = False
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status}  {r.name}: max relative error {r.max_rel_error:.3e}")
        failed = failed or not r.passed
    if failed:
        raise NumericError(f"gradient check exceeded tolerance {TOLERANCE}")
    return 0


def _cmd_dump_posteriors(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    feats = stack_frames(read_feature_file(args.features), ckpt.stack_factor)
    dump_posteriors(ckpt.model, feats, args.out_csv)
    print(args.out_csv)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ctcstack",
                     description="Train and evaluate online character-level "
                                 "CTC speech recognizers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a deterministic synthetic corpus")
    p.add_argument("--config", help="key = value config file with SynthConfig keys")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.add_argument("--utterances", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--proto-dim", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, help="noise stddev")
    p.add_argument("--frames-min", type=int, default=None)
    p.add_argument("--frames-max", type=int, default=None)
    p.add_argument("--words-min", type=int, default=None)
    p.add_argument("--words-max", type=int, default=None)
    p.add_argument("--words", default=None, help="comma-separated word list")
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="run one training stage")
    _add_training_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("pipeline", help="run teacher -> distill -> fine-tune")
    _add_training_flags(p)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("decode", help="print greedy hypotheses for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("eval", help="aggregate WER/CER over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--unit", choices=("word", "char"), default="word")
    p.add_argument("--out", default=None, help="directory for report files")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("dump-posteriors", help="per-frame label probabilities as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature file to decode")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=_cmd_dump_posteriors)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            print(parser.format_usage(), file=sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
