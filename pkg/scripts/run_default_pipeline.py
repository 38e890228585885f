#!/usr/bin/env python3
"""Run the default benchmark pipeline end to end into runs/default.

Usage: python scripts/run_default_pipeline.py [seed] [out_dir]
"""

import sys

from divseed.pipeline import PipelineConfig, run_pipeline


def main() -> int:
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 7
    out = sys.argv[2] if len(sys.argv) > 2 else "runs/default"
    summary = run_pipeline(PipelineConfig(seed=seed), out)
    for stage in summary["stages"]:
        print(f"{stage['name']:>10s}: {stage['seconds']:7.1f}s")
    report = summary["report"]
    print(f"mIoU {report['miou']:.4f}  per-class "
          f"{[None if v is None else round(v, 3) for v in report['per_class_iou']]}")
    print(f"artifacts in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
