#!/usr/bin/env python3
"""Sweep gating, training regime, expert count and group size; print mean deltas.

    python3 scripts/run_ablations.py --components gating,experts --seeds 1,2,3
"""
import argparse
import os

from moegrpo import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--components", default=",".join(harness.ABLATIONS))
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()

    seeds = [int(s) for s in args.seeds.split(",")]
    for component in args.components.split(","):
        res = harness.ablate({"train": {"epochs": args.epochs}}, component, seeds,
                             os.path.join(args.out, component), workers=args.workers)
        print(f"\n== {component} (baseline: {res['baseline_variant']})")
        for mean in res["means"]:
            d = res["deltas_vs_baseline"][mean["algo"]]
            print(f"  {mean['algo']:<10} test acc {mean['test_accuracy']:.4f} ({d['test_accuracy']:+.4f})"
                  f"  auc {mean['roc_auc']:.4f} ({d['roc_auc']:+.4f})")
        if "reference_annotation" in res:
            lo, hi = res["reference_annotation"]["expected_accuracy_drop_without_gating"]
            print(f"  published drop without gating: {lo:.2f}-{hi:.2f} (different data; not checked)")


if __name__ == "__main__":
    main()
