#!/usr/bin/env python3
"""Reproduce the sampling-strategy / pooling / k comparison tables on the
default synthetic benchmark.

Usage: python scripts/run_strategy_ablation.py [n_seeds] [out_prefix]

Writes <out_prefix>.json and <out_prefix>.txt (default runs/ablation.*).
"""

import json
import os
import sys

from divseed.pipeline import (
    PipelineConfig,
    ablation_run,
    format_ablation_table,
)

VARIANTS = [
    {"strategy": "diverse", "k": 20},
    {"strategy": "top_k", "k": 20},
    {"strategy": "spatial", "k": 20},
    {"strategy": "dense"},
    {"strategy": "diverse", "k": 5},
    {"strategy": "diverse", "k": 10},
    {"strategy": "diverse", "k": 50},
    {"strategy": "diverse", "k": 20, "pooling": "pixel"},
]


def main() -> int:
    n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 5
    prefix = sys.argv[2] if len(sys.argv) > 2 else "runs/ablation"
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    summary = ablation_run(
        PipelineConfig(), VARIANTS, seeds=list(range(n_seeds)), log=print
    )
    with open(prefix + ".json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table = format_ablation_table(summary)
    with open(prefix + ".txt", "w") as fh:
        fh.write(table)
    print()
    print(table, end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
