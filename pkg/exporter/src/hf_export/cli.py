"""hf-export command line.

    hf-export checkpoint --source gpt2-medium --out exports/gpt2-medium
    hf-export corpus --text wiki.test.txt --tokenizer gpt2-medium \
        --word-budget 5000 --split test --out exports/gpt2-medium
    hf-export verify --dir exports/gpt2-medium

`checkpoint` writes model.ckpt plus golden.bin; `corpus` writes
corpus.tok plus its sidecar next to them, so one directory holds a
complete, verifiable export. Exit codes: 0 success, 1 export or
verification failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import ExportError, __version__
from .container import read_container
from .convert import CHECKPOINT_NAME, GOLDEN_NAME, export_checkpoint
from .corpus import tokenize_corpus
from .golden import check_parity
from .recipe import ExportRecipe

CORPUS_NAME = "corpus.tok"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hf-export", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"hf-export {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ck = sub.add_parser("checkpoint", help="convert a causal LM into the container format")
    ck.add_argument("--source", required=True, help="model id or local model directory")
    ck.add_argument("--family", default="", help="gpt2 | gpt-neox | opt | bloom (default: detect)")
    ck.add_argument("--out", required=True, help="output directory")
    ck.add_argument("--model-id", default="", help="model_id stored in the container")
    ck.add_argument("--max-position", type=int, default=None,
                    help="position limit for families that declare none (bloom)")
    ck.add_argument("--golden-sequences", type=int, default=8)
    ck.add_argument("--golden-max-len", type=int, default=16)
    ck.add_argument("--golden-seed", type=int, default=0)

    co = sub.add_parser("corpus", help="tokenize text into the corpus format")
    co.add_argument("--text", required=True, help="UTF-8 text file")
    co.add_argument("--tokenizer", required=True,
                    help="tokenizer id/path, or word[:capacity] for the built-in test tokenizer")
    co.add_argument("--out", required=True, help="output directory")
    co.add_argument("--word-budget", type=int, default=None,
                    help="keep only the first N whitespace words")
    co.add_argument("--split", default="", help="split name recorded in the sidecar")
    co.add_argument("--checkpoint", default="",
                    help="exported model.ckpt to cross-check the vocabulary against")

    ve = sub.add_parser("verify", help="replay a golden fixture against an exported checkpoint")
    ve.add_argument("--dir", default="", help=f"directory holding {CHECKPOINT_NAME} + {GOLDEN_NAME}")
    ve.add_argument("--checkpoint", default="")
    ve.add_argument("--golden", default="")
    ve.add_argument("--tolerance", type=float, default=None,
                    help="override the tolerance stored in the fixture")
    return parser


def _cmd_checkpoint(args) -> int:
    recipe = ExportRecipe(
        source=args.source,
        family=args.family,
        model_id=args.model_id,
        max_position=args.max_position,
        golden_sequences=args.golden_sequences,
        golden_max_len=args.golden_max_len,
        golden_seed=args.golden_seed,
    )
    ckpt, golden = export_checkpoint(recipe, args.out)
    config, _ = read_container(ckpt)
    print(f"checkpoint: {ckpt}  ({config['model_id']}: L={config['n_layers']}, "
          f"d={config['d_model']}, vocab={config['vocab_size']}, pe={config['pe_type']})")
    print(f"golden:     {golden}")
    return 0


def _cmd_corpus(args) -> int:
    text_path = Path(args.text)
    if not text_path.is_file():
        raise ExportError(f"text file not found: {text_path}")
    model_vocab = None
    if args.checkpoint:
        config, _ = read_container(args.checkpoint)
        model_vocab = int(config["vocab_size"])
    recipe = ExportRecipe(
        source=args.tokenizer,
        tokenizer=args.tokenizer,
        corpus_source=str(text_path),
        word_budget=args.word_budget,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / CORPUS_NAME
    sidecar = tokenize_corpus(
        recipe,
        text_path.read_text(encoding="utf-8"),
        out_path,
        model_vocab_size=model_vocab,
        split=args.split,
    )
    print(f"corpus: {out_path}  ({sidecar['word_count']} words -> "
          f"{sidecar['token_count']} tokens, id {sidecar['corpus_id']})")
    return 0


def _cmd_verify(args) -> int:
    if args.dir:
        ckpt = Path(args.dir) / CHECKPOINT_NAME
        golden = Path(args.dir) / GOLDEN_NAME
    elif args.checkpoint and args.golden:
        ckpt, golden = Path(args.checkpoint), Path(args.golden)
    else:
        raise ExportError("verify needs --dir, or both --checkpoint and --golden")
    report = check_parity(ckpt, golden, tolerance=args.tolerance)
    for idx, diff in enumerate(report["per_sequence"]):
        print(f"sequence {idx}: max abs diff {diff:.3e}")
    status = "OK" if report["ok"] else "FAIL"
    print(f"{status}: max abs diff {report['max_abs_diff']:.3e} "
          f"(tolerance {report['tolerance']:.1e})")
    return 0 if report["ok"] else 1


def entry(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "checkpoint": _cmd_checkpoint,
        "corpus": _cmd_corpus,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(entry())


if __name__ == "__main__":
    main()
