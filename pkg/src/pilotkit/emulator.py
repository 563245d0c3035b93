"""Task emulator: a stand-in executable with configurable compute/sleep load.

Runs for a duration sampled from a clamped normal distribution, either
sleeping (no CPU) or spinning (burns CPU), then exits 0. Bad arguments exit
with code 2. Kept import-light so process startup stays cheap.
"""

from __future__ import annotations

import argparse
import random
import sys
import time


def sample_duration(mean_s: float, std_s: float, rng: random.Random | None = None) -> float:
    rng = rng or random
    if std_s <= 0:
        return max(0.0, mean_s)
    return max(0.0, rng.gauss(mean_s, std_s))


def spin_for(duration_s: float):
    end = time.perf_counter() + duration_s
    x = 0
    while time.perf_counter() < end:
        x += 1
    return x


def emulate(mean_s: float, std_s: float, mode: str, seed: int | None = None) -> float:
    rng = random.Random(seed) if seed is not None else random
    duration = sample_duration(mean_s, std_s, rng)
    if mode == "spin":
        spin_for(duration)
    else:
        time.sleep(duration)
    return duration


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pilotkit-emulate")
    parser.add_argument("--mean", type=float, default=None)
    parser.add_argument("--std", type=float, default=0.0)
    parser.add_argument("--duration", type=float, default=None,
                        help="fixed duration; overrides --mean/--std")
    parser.add_argument("--mode", choices=("sleep", "spin"), default="sleep")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--exit-code", type=int, default=0)
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 2
    if args.duration is not None:
        mean, std = args.duration, 0.0
    elif args.mean is not None:
        mean, std = args.mean, args.std
    else:
        print("need --mean or --duration", file=sys.stderr)
        return 2
    if mean < 0 or std < 0:
        print("durations must be non-negative", file=sys.stderr)
        return 2
    emulate(mean, std, args.mode, args.seed)
    return args.exit_code


if __name__ == "__main__":
    sys.exit(main())
