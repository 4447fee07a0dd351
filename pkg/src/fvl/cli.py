"""Command-line entry point.

Subcommands: gen-data, train-tokenizer, pretrain, finetune, evaluate,
export, ablate. Every subcommand reads a config file plus repeatable
`--set key=value` overrides, writes its artifacts under the run directory,
and exits 0 on success / 2 on usage or missing-artifact errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from .errors import FvlError
from .config import load_config
from .finetune import FINETUNE_TASKS
from .harness import Workspace

logger = logging.getLogger("fvl")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="run directory (overrides out_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fvl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-data", "generate the synthetic dataset, vocabulary, and attribute set"),
        ("train-tokenizer", "train the discrete image tokenizer and cache code grids"),
        ("ablate", "run the task-combination matrix and emit the meta-sum table"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("pretrain", help="multi-task pre-training")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("finetune", help="fine-tune one downstream task")
    _add_common(p)
    p.add_argument("--task", required=True, choices=FINETUNE_TASKS)
    p.add_argument("--init", default=None, help="pre-trained checkpoint to start from")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on one task")
    _add_common(p)
    p.add_argument("--task", required=True, choices=FINETUNE_TASKS)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--force", action="store_true", help="ignore config-hash mismatch")

    p = sub.add_parser("export", help="export image/text/joint embeddings")
    _add_common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out-file", default=None)
    p.add_argument("--force", action="store_true")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, int(os.environ.get("FVL_THREADS", "1"))))

    try:
        cfg = load_config(args.config, args.sets, args.seed, args.out)
        ws = Workspace(cfg)
        ws.root.mkdir(parents=True, exist_ok=True)
        ws.write_resolved_config()

        if args.command == "gen-data":
            summary = ws.generate_data()
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "train-tokenizer":
            out = ws.train_image_tokenizer()
            print(json.dumps(out, indent=2, sort_keys=True))
        elif args.command == "pretrain":
            final = ws.pretrain(resume=args.resume)
            print(str(final))
        elif args.command == "finetune":
            path = ws.finetune(args.task, init_ckpt=args.init)
            print(str(path))
        elif args.command == "evaluate":
            if not args.checkpoint:
                print("error: missing checkpoint (pass --checkpoint)", file=sys.stderr)
                return 2
            result = ws.evaluate(args.task, args.checkpoint, split_name=args.split, force=args.force)
            print(json.dumps(result, indent=2, sort_keys=True))
        elif args.command == "export":
            if not args.checkpoint:
                print("error: missing checkpoint (pass --checkpoint)", file=sys.stderr)
                return 2
            path = ws.export(args.checkpoint, args.split, args.out_file, force=args.force)
            print(str(path))
        elif args.command == "ablate":
            report = ws.ablate()
            from .harness import render_table

            print(render_table(report))
        else:  # pragma: no cover - argparse enforces the choices
            return 2
    except FvlError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
