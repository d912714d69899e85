"""Baseline (gamma=0) vs. similarity mining (gamma=0.2) on the default synthetic dataset.

Usage:
    python scripts/run_ablation.py --archs triplet --seeds 0 1 2 --out results/ablation
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from simattn.experiments import ablation_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--archs", nargs="+", default=["siamese", "triplet", "quadruplet"])
    ap.add_argument("--gammas", nargs="+", type=float, default=[0.0, 0.2])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = {}
    for arch in args.archs:
        for gamma in args.gammas:
            r1 = []
            for seed in args.seeds:
                t0 = time.time()
                res = ablation_run(arch, gamma, seed, epochs=args.epochs, cache_dir=out)
                r1.append(res["recall_at_1"])
                print(
                    f"{arch:10s} gamma={gamma:.1f} seed={seed} R@1={res['recall_at_1']:.4f} "
                    f"attn_iou={res['attention_iou']:.4f} ({time.time() - t0:.0f}s)",
                    flush=True,
                )
            table[(arch, gamma)] = float(np.mean(r1))
    print("\narch        gamma  mean R@1")
    for (arch, gamma), v in table.items():
        print(f"{arch:10s}  {gamma:.1f}    {100 * v:.2f}")
    (out / "summary.json").write_text(json.dumps({f"{a}/{g}": v for (a, g), v in table.items()}, indent=1))


if __name__ == "__main__":
    main()
