"""Negotiation and memory ablations over seeded batches, printed as a table.

Usage: python3 scripts/run_ablations.py --scenario intersection --seeds 20 --out runs/ablations
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from codriving.config import default_config
from codriving.gateway import StubBackend
from codriving.harness import Flags, report, run_batch

VARIANTS = {
    "compliant": ("stub-compliant", Flags()),
    "adversarial": ("stub-adversarial", Flags()),
    "no-negotiation": ("stub-compliant", Flags(negotiation=False)),
    "0-shot": ("stub-compliant", Flags(memory=False, shots=0)),
    "5-shot": ("stub-compliant", Flags(shots=5)),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scenario", default="intersection", choices=("highway", "merge", "intersection"))
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--out", type=Path, default=Path("runs/ablations"))
    parser.add_argument("--variants", nargs="*", default=list(VARIANTS), choices=list(VARIANTS))
    args = parser.parse_args()

    config = default_config(args.scenario)
    rows = {}
    for name in args.variants:
        mode, flags = VARIANTS[name]
        out = args.out / args.scenario / name
        run_batch(args.scenario, args.seeds, flags, out, config, backend=StubBackend(mode))
        rows[name] = report(out).as_dict()

    print(f"{'variant':<16}{'success':>9}{'PET avg':>9}{'PET min':>9}{'v avg':>8}")
    for name, rep in rows.items():
        pet, vel = rep["pet"] or {}, rep["travel_velocity"] or {}
        print(
            f"{name:<16}{100 * rep['success_rate']:>8.0f}%"
            f"{pet.get('average', float('nan')):>9.2f}{pet.get('min', float('nan')):>9.2f}"
            f"{vel.get('average', float('nan')):>8.2f}"
        )
    (args.out / args.scenario / "ablations.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
