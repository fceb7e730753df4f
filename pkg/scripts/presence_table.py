#!/usr/bin/env python3
"""Leave-one-scene-out presence P/R for a strong and a degraded server.

Runs the synthetic suite twice: the default matcher profile on look-alike
objects, then a weak profile on poorer look-alikes, and prints both tables.
"""

import argparse
import json
from pathlib import Path

from poseleak.experiments import attack_suite, evaluate_presence, format_presence_table, presence_table_record
from poseleak.locserver import PROFILES, ServerConfig
from poseleak.scenegen import SuiteConfig, generate_suite


def run(seed: int, profile: str, similarity: float):
    suite = generate_suite(SuiteConfig(seed=seed, similarity=(similarity, similarity)))
    runs = attack_suite(suite, PROFILES[profile], ServerConfig(seed=seed))
    return evaluate_presence(runs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, help="directory for TSV/JSON tables")
    ap.add_argument("--degraded-profile", default="tier_low", choices=sorted(PROFILES))
    ap.add_argument("--degraded-similarity", type=float, default=0.6)
    args = ap.parse_args()

    cases = {
        "default": ("tier_high", 0.8),
        "degraded": (args.degraded_profile, args.degraded_similarity),
    }
    for name, (profile, sim) in cases.items():
        table = run(args.seed, profile, sim)
        print(f"# {name}: profile={profile} similarity={sim} seed={args.seed}")
        print(format_presence_table(table))
        if args.out:
            args.out.mkdir(parents=True, exist_ok=True)
            (args.out / f"{name}.tsv").write_text(format_presence_table(table))
            (args.out / f"{name}.json").write_text(json.dumps(presence_table_record(table), indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
