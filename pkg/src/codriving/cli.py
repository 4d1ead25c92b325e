"""Command line: ``codriving run`` for seeded batches, ``codriving report`` for metrics."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import SCENARIO_KINDS, ConfigError, default_config, load_config
from .harness import Flags, report, run_batch

BACKENDS = {"stub": "stub-compliant", "adversarial-stub": "stub-adversarial", "remote": "remote"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codriving", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-episode progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a seeded batch of episodes")
    run.add_argument("--scenario", choices=SCENARIO_KINDS, required=True)
    run.add_argument("--backend", choices=sorted(BACKENDS), default="stub")
    run.add_argument("--shots", type=int, default=None, help="memories per prompt (default from config)")
    run.add_argument("--seeds", type=int, default=20, help="run seeds 0..N-1")
    run.add_argument("--no-negotiation", action="store_true", help="skip the conflict coordinator")
    run.add_argument("--no-memory", action="store_true", help="skip retrieval and memory augment")
    run.add_argument("--llm-coordinator", action="store_true", help="ask the backend to confirm passing orders")
    run.add_argument("--memory-db", type=Path, default=None, help="JSONL store loaded before and saved after each episode")
    run.add_argument("--config", type=Path, default=None, help="TOML file overriding the defaults")
    run.add_argument("--out", type=Path, required=True, help="output directory for traces and results")

    rep = sub.add_parser("report", help="compute metrics for a batch directory")
    rep.add_argument("--in", dest="in_dir", type=Path, required=True)
    return parser


def cmd_run(args) -> int:
    if args.config is not None:
        config = load_config(args.config, kind=args.scenario)
    else:
        config = default_config(args.scenario)
    config = replace(config, backend=replace(config.backend, mode=BACKENDS[args.backend]))
    shots = config.memory.shots if args.shots is None else args.shots
    if shots < 0:
        raise ConfigError("--shots must be >= 0")
    flags = Flags(
        negotiation=not args.no_negotiation,
        memory=not args.no_memory,
        shots=shots,
        llm_coordinator=args.llm_coordinator,
    )
    results = run_batch(args.scenario, args.seeds, flags, args.out, config, memory_db=args.memory_db)
    ok = sum(r.success for r in results)
    print(f"{args.scenario}: {ok}/{len(results)} episodes succeeded; results in {args.out}")
    return 0


def cmd_report(args) -> int:
    rep = report(args.in_dir)
    print(rep.to_text())
    (args.in_dir / "summary.json").write_text(json.dumps(rep.as_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_report(args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
