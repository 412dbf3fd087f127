"""Command-line entry point.

Exit codes: 0 ok, 1 stage failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, load_pipeline_config
from .pipeline import PipelineRun, StageFailure
from .synthetic import generate_synthetic

log = logging.getLogger(__name__)

PIPELINE_COMMANDS = ("serialize", "enrich", "train", "embed", "ensemble", "eval", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="es2emb",
        description="Event-sequence user embeddings: serialize, enrich, train, embed, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="pipeline config file")
        p.add_argument("--force", action="store_true", help="rebuild even if artifacts exist")
        p.add_argument(
            "--stub-llm", action="store_true",
            help="use the deterministic offline stub instead of the chat endpoint",
        )

    for name, help_text in (
        ("serialize", "write text corpora for every configured format"),
        ("enrich", "build the fine-tuning corpus via the chat gateway"),
        ("train", "fine-tune the language model on the corpus"),
        ("embed", "extract user embeddings from the trained model"),
        ("ensemble", "concatenate embedding matrices listed in ensemble.inputs"),
        ("eval", "holdout + cross-validated probe evaluation"),
        ("pipeline", "run all stages in order"),
    ):
        add_config_args(sub.add_parser(name, help=help_text))

    ablate = sub.add_parser("ablate", help="run one of the ablation studies")
    ablate.add_argument("study", choices=["components", "formats", "datasize"])
    add_config_args(ablate)

    synth = sub.add_parser("synth", help="generate a seeded synthetic transaction dataset")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--users", type=int, default=50)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--unlabeled-frac", type=float, default=0.0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 0

    if args.command == "synth":
        paths = generate_synthetic(
            Path(args.out), n_users=args.users, seed=args.seed,
            unlabeled_fraction=args.unlabeled_frac,
        )
        log.info("[synth] wrote %s", paths.events_csv.parent)
        return 0

    try:
        config = load_pipeline_config(args.config)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2

    run = PipelineRun(config, stub_llm=args.stub_llm, force=args.force)
    try:
        if args.command == "serialize":
            run.serialize()
        elif args.command == "enrich":
            run.enrich()
        elif args.command == "train":
            run.train()
        elif args.command == "embed":
            run.embed()
        elif args.command == "ensemble":
            run.ensemble()
        elif args.command == "eval":
            run.evaluate()
        elif args.command == "pipeline":
            run.pipeline()
        elif args.command == "ablate":
            if args.study == "components":
                run.ablate_components()
            elif args.study == "formats":
                run.ablate_formats()
            else:
                run.ablate_datasize()
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except StageFailure as exc:
        print(f"[{exc.stage}] failed: {exc.cause}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
