"""Run the whole pipeline on synthetic ECG at desk scale and print the metrics table.

    python scripts/synthetic_pipeline.py --workdir /tmp/hb --task sleep3

Equivalent to ``heartbert run-all`` with a small model; extra ``--set``
overrides are passed through.
"""

import argparse
import sys

from heartbert.cli import main as cli_main

DESK = ["synth.n_records=4", "synth.duration_s=60", "tokenizer.vocab_size=400", "model.n_layers=2",
        "model.n_heads=2", "model.d_model=32", "model.d_ff=64", "model.vocab_size=400", "pretrain.epochs=3",
        "pretrain.batch_size=8", "pretrain.lr=1e-3", "finetune.epochs=3", "finetune.lrs=5e-3"]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="work")
    ap.add_argument("--task", default="heartbeat4", choices=("heartbeat4", "sleep3", "sleep5"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[])
    args = ap.parse_args()
    sets = DESK + [f"paths.workdir={args.workdir}", f"task.kind={args.task}", f"run.seed={args.seed}"]
    if args.task != "heartbeat4":
        # sleep stages need several 30 s epochs per record and stage-dependent heart rate
        sets += ["synth.duration_s=300", "synth.vary_stage_rate=true"]
    sets += args.set
    code = cli_main(["run-all"] + [a for s in sets for a in ("--set", s)])
    if code == 0:
        with open(f"{args.workdir}/metrics.txt") as fh:
            print(fh.read())
    return code


if __name__ == "__main__":
    sys.exit(main())
