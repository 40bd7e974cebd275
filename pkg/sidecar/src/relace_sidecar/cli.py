"""relace command line: train a reranker checkpoint, serve scores, build a tiny base."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .model import DEFAULT_BASE_CHECKPOINT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relace", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fine-tune a cross-encoder with the listwise objective")
    p.add_argument("train_jsonl", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base", default=DEFAULT_BASE_CHECKPOINT,
                   help="base checkpoint identifier or directory")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("serve", help="serve scores over the wire protocol")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8091)
    p.add_argument("--max-tokens", type=int, default=512)

    p = sub.add_parser("init-base", help="build a tiny offline base checkpoint")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--vocab-file", type=Path,
                   help="newline-separated word list; defaults to a small built-in set")
    return parser


def cmd_train(args) -> int:
    from .train import TrainRunConfig, train

    config = TrainRunConfig(
        base_checkpoint=str(args.base),
        epochs=args.epochs,
        max_tokens=args.max_tokens,
        learning_rate=args.lr,
        seed=args.seed,
    )
    result = train(args.train_jsonl, config, args.out)
    best = result.best
    print(
        f"best epoch {best.epoch}: val_top1={best.val_top1:.4f} "
        f"val_loss={best.val_loss:.4f} -> {result.checkpoint_dir}"
    )
    return 0


def cmd_serve(args) -> int:
    from .model import CrossEncoder
    from .serve import ScoringService

    encoder = CrossEncoder(str(args.checkpoint), max_tokens=args.max_tokens)
    service = ScoringService(encoder, host=args.host, port=args.port)
    print(f"serving scores on {service.address}")
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.shutdown()
    return 0


def cmd_init_base(args) -> int:
    from .tiny import build_tiny_checkpoint

    if args.vocab_file:
        words = args.vocab_file.read_text(encoding="utf-8").split()
    else:
        words = (
            "what how must facilities document checks using protocol alpha omega "
            "requirement the a is are records batch retention period years quality "
            "unit approves deviation audit label sample storage training supplier"
        ).split()
    path = build_tiny_checkpoint(args.out, words)
    print(f"tiny base checkpoint written to {path}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {"train": cmd_train, "serve": cmd_serve, "init-base": cmd_init_base}
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
