"""Print trainable-parameter counts for pretraining and every freeze policy.

    python scripts/param_table.py [--set model.n_layers=4 ...]
"""

import argparse

from heartbert.config import parse_config
from heartbert.pipeline import parameter_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    args = ap.parse_args()
    cfg = parse_config("", args.set)
    table = parameter_table(cfg.model)
    print(f"pretraining: {table.pop('pretrain'):,}")
    print(f"| policy | 3 classes | 4 classes | 5 classes |\n|---|---:|---:|---:|")
    for label in dict.fromkeys(k[0] for k in table):
        print(f"| {label} | " + " | ".join(f"{table[(label, k)]:,}" for k in (3, 4, 5)) + " |")


if __name__ == "__main__":
    main()
