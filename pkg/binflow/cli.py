"""
Command-line entry point: ``binflow <subcommand> [options]``.

Exit status 0 on success, 1 when the step fails, 2 for usage errors.
"""

import argparse
import sys
from typing import List, Optional

from loguru import logger

from binflow.config import load_run_config
from binflow.pipeline import BinFlow

LOG_LEVELS = ("TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL")


def _common() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group("run options")
    group.add_argument("--config", help="key=value config file")
    group.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
    group.add_argument("--seed", type=int, help="root seed")
    group.add_argument("--manifest", help="run manifest path (default run.manifest)")
    group.add_argument("--log-level", default="INFO", type=str.upper, choices=LOG_LEVELS)
    group.add_argument("--log-file", help="also log to this file")
    return parent


def _bpe_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--merges", required=True)
    parser.add_argument("--vocab", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="binflow", description="Unsupervised binary code translation across ISAs.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")
    common = _common()

    p = sub.add_parser("normalize", parents=[common], help="parse dumps and normalize instructions")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--isa", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profiles", help="YAML file overriding the shipped ISA profiles")

    p = sub.add_parser("build-corpus", parents=[common], help="deduplicated corpus with a vocabulary growth report")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--isa", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=1, help="programs per vocabulary growth step")
    p.add_argument("--profiles")

    for name, help_text in (("learn-bpe", "learn BPE merges and the joint vocabulary"), ("select-merges", "choose the merge count")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--src", required=True, help="source ISA corpus")
        p.add_argument("--tgt", required=True, help="target ISA corpus")
        if name == "learn-bpe":
            _bpe_inputs(p)
        else:
            p.add_argument("--report", required=True)

    for name, help_text in (("pretrain", "CLM + MLM pretraining"), ("train", "pretraining then DAE + BT + MLE training")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--src", required=True)
        p.add_argument("--tgt", required=True)
        _bpe_inputs(p)
        p.add_argument("--checkpoint", required=True)
        if name == "train":
            p.add_argument("--metrics", help="per-step metrics log (default <checkpoint>.metrics)")

    p = sub.add_parser("translate", parents=[common], help="translate a corpus or a sample file")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    _bpe_inputs(p)
    p.add_argument("--out", required=True)
    p.add_argument("--src-isa")
    p.add_argument("--tgt-isa")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--show", type=int, default=0, metavar="N", help="print N source/translation/reference blocks")
    p.add_argument("--reference", help="reference corpus for --show")

    p = sub.add_parser("eval-bleu", parents=[common], help="corpus BLEU of a translation")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out")

    p = sub.add_parser("gen-toy", parents=[common], help="generate toy corpora and detection samples")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="training programs per ISA")

    p = sub.add_parser("train-detector", parents=[common], help="train the sequence classifier")
    p.add_argument("--samples", required=True)
    p.add_argument("--checkpoint", required=True, help="translator checkpoint providing the embeddings")
    _bpe_inputs(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("score", parents=[common], help="score binaries with a trained detector")
    p.add_argument("--samples", required=True)
    p.add_argument("--detector", required=True)
    _bpe_inputs(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cross-isa", action="store_true", help="allow samples in another ISA than the detector's")

    p = sub.add_parser("eval-auc", parents=[common], help="AUC of a score report")
    p.add_argument("--report", required=True)
    p.add_argument("--out")

    p = sub.add_parser("export-embeddings", parents=[common], help="dump the token embedding table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--filter", choices=("all", "opcode"), default="all")
    return parser


def setup_logging(level: str, log_file: Optional[str] = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level)
    if log_file:
        logger.add(log_file, level=level, encoding="utf-8")


def dispatch(flow: BinFlow, args: argparse.Namespace) -> None:
    command = args.command
    if command == "normalize":
        flow.normalize(args.inputs, args.isa, args.out, args.profiles)
    elif command == "build-corpus":
        flow.build_corpus(args.inputs, args.isa, args.out, args.groups, args.profiles)
    elif command == "learn-bpe":
        flow.learn_bpe(args.src, args.tgt, args.merges, args.vocab)
    elif command == "select-merges":
        print(flow.select_merges(args.src, args.tgt, args.report))
    elif command == "pretrain":
        flow.pretrain(args.src, args.tgt, args.merges, args.vocab, args.checkpoint)
    elif command == "train":
        flow.train(args.src, args.tgt, args.merges, args.vocab, args.checkpoint, args.metrics)
    elif command == "translate":
        out = flow.translate(args.input, args.checkpoint, args.merges, args.vocab, args.out, args.src_isa, args.tgt_isa, args.workers)
        if args.show > 0 and not args.input.endswith(".jsonl"):
            print(flow.demonstration(args.input, out, args.reference, args.show))
    elif command == "eval-bleu":
        print(flow.eval_bleu(args.hyp, args.ref, args.out).to_text(), end="")
    elif command == "gen-toy":
        flow.gen_toy(args.out, args.count)
    elif command == "train-detector":
        flow.train_detector(args.samples, args.checkpoint, args.merges, args.vocab, args.out)
    elif command == "score":
        flow.score(args.samples, args.detector, args.merges, args.vocab, args.out, args.cross_isa)
    elif command == "eval-auc":
        print(f"auc={flow.eval_auc(args.report, args.out):.6f}")
    elif command == "export-embeddings":
        flow.export_embeddings(args.checkpoint, args.vocab, args.out, args.filter)
    else:
        raise ValueError(f"Unknown subcommand {command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.log_level, args.log_file)
    try:
        config = load_run_config(args.config, args.set, seed=args.seed, manifest=args.manifest)
        dispatch(BinFlow(config), args)
    except Exception as e:  # noqa: BLE001
        logger.opt(exception=e).debug(f"{args.command} failed")
        print(f"binflow {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
