"""Lane-keeping accuracy of the steering law for a grid of heading gains and lookaheads.

A single CAV drives every intersection movement on an empty road; the
script reports the worst lateral offset from the lane centreline.
"""

from __future__ import annotations

import argparse
import itertools
from dataclasses import replace

from codriving.config import default_config
from codriving.harness import Flags, run_episode
from codriving.world import build_lanes


def worst_offset(config) -> float:
    lanes = build_lanes(config)
    worst = 0.0
    for seed in range(12):
        _, state = run_episode(config.with_seed(seed), flags=Flags(memory=False))
        for row in state.trace:
            _, lat = lanes[row["lane"]].project(row["x"], row["y"])
            worst = max(worst, abs(lat))
    return worst


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--gains", type=float, nargs="*", default=[1.0, 2.0, 4.0, 6.0])
    parser.add_argument("--lookahead-times", type=float, nargs="*", default=[0.3, 0.6, 1.0])
    parser.add_argument("--lookahead-min", type=float, nargs="*", default=[3.0, 6.0])
    args = parser.parse_args()

    base = default_config("intersection", cav_count=1)
    print(f"{'K_h':>5}{'t_look':>8}{'d_min':>7}{'max |offset| m':>16}")
    for k_h, t_look, d_min in itertools.product(args.gains, args.lookahead_times, args.lookahead_min):
        control = replace(base.control, K_h=k_h, lookahead_time=t_look, lookahead_min=d_min)
        print(f"{k_h:>5.1f}{t_look:>8.2f}{d_min:>7.1f}{worst_offset(replace(base, control=control)):>16.2f}")


if __name__ == "__main__":
    main()
