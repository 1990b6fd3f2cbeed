#!/usr/bin/env python3
"""GRPO vs PPO best-epoch table over several seeds, next to the published targets.

    python3 scripts/reproduce_comparison.py --seeds 1,2,3,4,5 --workers 4
"""
import argparse
import os

from moegrpo import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    ap.add_argument("--out", default="runs/comparison")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    result = harness.compare({"train": {"epochs": args.epochs}}, seeds, args.out, workers=args.workers)

    print(f"{'algo':<6} {'seed':>5} {'epoch':>5} " + " ".join(f"{c:>14}" for c in harness.TABLE_COLUMNS))
    for r in result["rows"] + result["means"]:
        epoch = "" if r["best_epoch"] is None else r["best_epoch"]
        print(f"{r['algo']:<6} {r['seed']:>5} {epoch:>5} " + " ".join(f"{r[c]:>14.4f}" for c in harness.TABLE_COLUMNS))
    for algo, target in harness.REFERENCE_TARGETS.items():
        print(f"{algo:<6} {'ref':>5} {'':>5} " + " ".join(f"{target[c]:>14.4f}" for c in harness.TABLE_COLUMNS))
    print(f"\nwrote {args.out}/compare.csv and compare.json")


if __name__ == "__main__":
    main()
