"""``heartbert`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import validate_config
from .errors import HeartBertError
from .training import FreezePolicy

log = logging.getLogger("heartbert")

COMMANDS = ("synth", "ingest", "train-quantizer", "prepare-corpus", "train-tokenizer", "pretrain",
            "prepare-task", "finetune", "evaluate", "inspect-params", "run-all")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="heartbert", description="ECG synthetic-language pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="section.key = value file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if name == "inspect-params":
            p.add_argument("--pretrain", action="store_true", help="print the pretraining total only")
            p.add_argument("--freeze", default=None, help="all-frozen | last-N | half | all-unfrozen")
            p.add_argument("--classes", type=int, default=None)
    return ap


def _inspect(cfg, args) -> int:
    from .pipeline import parameter_table, trainable_count
    if args.pretrain:
        print(f"{trainable_count(cfg.model, None, None):,}")
        return 0
    if args.freeze is not None:
        policy = FreezePolicy.parse(args.freeze, cfg.model.n_layers)
        print(f"{trainable_count(cfg.model, policy, args.classes or 3):,}")
        return 0
    table = parameter_table(cfg.model)
    print(f"pretrain (all trainable)   {table.pop('pretrain'):>12,}")
    print(f"{'policy':<16}{'3 classes':>12}{'4 classes':>12}{'5 classes':>12}")
    for label in dict.fromkeys(k[0] for k in table):
        print(f"{label:<16}" + "".join(f"{table[(label, k)]:>12,}" for k in (3, 4, 5)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = validate_config(args.config, args.set)
        if args.command == "inspect-params":
            return _inspect(cfg, args)
        from .pipeline import END_TO_END, STAGES
        stages = END_TO_END if args.command == "run-all" else (args.command,)
        for stage in stages:
            outputs = STAGES[stage](cfg)
            missing = [str(p) for p in outputs if not Path(p).exists()]
            if missing:
                print(f"error: {stage} did not write {', '.join(missing)}", file=sys.stderr)
                return 1
            for p in outputs:
                print(f"{stage}: wrote {p}")
    except HeartBertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
