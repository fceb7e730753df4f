#!/usr/bin/env python3
"""Genuine vs malicious acceptance as the minimum-object threshold grows.

One curve per inlier fraction X; the output TSV is long-form
(fraction_x, min_objects, genuine_accept, malicious_accept) for plotting.
"""

import argparse
from pathlib import Path

from poseleak.experiments import defense_sweep, ideal_threshold_exists, sweep_is_monotone
from poseleak.locserver import PROFILES, ServerConfig
from poseleak.scenegen import SuiteConfig, generate_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--profile", default="tier_high", choices=sorted(PROFILES))
    ap.add_argument("--fractions", default="0.05,0.1,0.2,0.3", help="comma-separated X values")
    ap.add_argument("--out", type=Path, help="TSV output path")
    args = ap.parse_args()

    suite = generate_suite(SuiteConfig(seed=args.seed))
    lines = ["fraction_x\tmin_objects\tgenuine_accept\tmalicious_accept"]
    for x in (float(v) for v in args.fractions.split(",")):
        rows = defense_sweep(suite, PROFILES[args.profile], x, None, ServerConfig(seed=args.seed))
        lines += [f"{x:g}\t{r.min_objects}\t{r.genuine_accept:.4f}\t{r.malicious_accept:.4f}" for r in rows]
        print(f"X={x:g}: monotone={sweep_is_monotone(rows)} clean_threshold={ideal_threshold_exists(rows)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        print(text, end="")


if __name__ == "__main__":
    main()
