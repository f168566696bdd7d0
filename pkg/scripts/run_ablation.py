"""Block-toggle ablation on synthetic pairs: which stages earn their keep.

Trains six variants (no blocks, each block alone, all blocks) under one
seeded protocol and prints a comparison table. The default settings mirror
the acceptance protocol (16 pairs, 200 steps) and take a couple of minutes;
pass --steps 50 for a quick look.

    python3 scripts/run_ablation.py [--steps 200] [--pairs 16] [--seed 0]
"""

import argparse
import json
from pathlib import Path

from u2cllie.cli import run_ablation
from u2cllie.image_io import make_synthetic_dataset
from u2cllie.network import TrainerConfig, toy_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--pairs", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json-out", help="also write the rows to this path")
    args = ap.parse_args()

    dataset = make_synthetic_dataset(count=args.pairs, extent=32, seed=args.seed)
    tcfg = TrainerConfig(steps=args.steps, seed=args.seed)
    rows = run_ablation(toy_config(seed=args.seed), tcfg, dataset)

    print(f"{'variant':<8}  {'params':>8}  {'final_loss':>10}  {'psnr_gain':>9}")
    for r in rows:
        print(f"{r['variant']:<8}  {r['params']:>8d}  "
              f"{r['final_loss']:>10.4f}  {r['psnr_gain']:>9.2f}")

    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        print(f"rows written to {args.json_out}")


if __name__ == "__main__":
    main()
