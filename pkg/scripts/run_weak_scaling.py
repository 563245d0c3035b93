#!/usr/bin/env python3
"""Weak-scaling experiment: tasks/cores ratio held constant while the
pilot grows from 8 to 1024 nodes. Run twice, once with no launch latency
and once with a loaded acknowledgment model, to see the latency cost grow
with scale.

Usage: python3 scripts/run_weak_scaling.py [OUT_DIR]
"""

import sys

from pilotkit.harness import ExperimentSpec, run_experiment

CELLS = [8, 32, 128, 512, 1024]


def spec(latency_model: dict) -> ExperimentSpec:
    return ExperimentSpec(
        kind="weak",
        pilots=[{"nodes": n, "cores_per_node": 128} for n in CELLS],
        tasks_per_pilot=[n * 128 for n in CELLS],
        duration_range_s=[1.0, 1.0],
        latency_model=latency_model,
        repetitions=1,
        seed=1,
    )


def main() -> int:
    out = sys.argv[1] if len(sys.argv) > 1 else "./weak_scaling"
    run_experiment(spec({}), f"{out}/no_latency")
    run_experiment(
        spec({"ack_mean_s": 0.135, "ack_std_s": 0.107,
              "ack_scale_exponent": 0.5}),
        f"{out}/loaded_ack")
    print(f"summaries under {out}/no_latency and {out}/loaded_ack")
    return 0


if __name__ == "__main__":
    sys.exit(main())
