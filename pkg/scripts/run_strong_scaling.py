#!/usr/bin/env python3
"""Strong-scaling experiment: a fixed workload of 16384 32-core tasks on
pilots of 512, 1024 and 2048 nodes. Generation count and TTX should halve
with each doubling of the resource.

Usage: python3 scripts/run_strong_scaling.py [OUT_DIR]
"""

import sys

from pilotkit.harness import ExperimentSpec, run_experiment


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "./strong_scaling"
    spec = ExperimentSpec(
        kind="strong",
        pilots=[{"nodes": n, "cores_per_node": 32} for n in (512, 1024, 2048)],
        tasks_per_pilot=[16384] * 3,
        cores_per_task=32,
        duration_range_s=[0.5, 0.5],
        repetitions=1,
        seed=2,
    )
    run_experiment(spec, out)
    print(f"summary: {out}/summary.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
