"""Desk demo: synthesize pairs, train the toy model briefly, enhance a scene.

Writes everything under ./demo_out and prints the before/after PSNR. Takes
about a minute with the default step count.

    python3 scripts/demo_enhance.py [--steps 60] [--out demo_out]
"""

import argparse
from pathlib import Path

import numpy as np

from u2cllie.image_io import Image, make_synthetic_dataset, save_image
from u2cllie.network import (TrainerConfig, build_model, evaluate, forward,
                             save_checkpoint, toy_config, train_toy)
from u2cllie.engine import Tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=60)
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset = make_synthetic_dataset(count=8, extent=32, seed=args.seed)
    model = build_model(toy_config(seed=args.seed))
    tcfg = TrainerConfig(steps=args.steps, seed=args.seed)

    print(f"training {model.param_count():,} parameters for {args.steps} steps ...")
    history = train_toy(model, dataset, tcfg)
    print(f"loss {history[0].total:.4f} -> {history[-1].total:.4f}")

    report = evaluate(model, dataset)
    print(f"psnr in {report['psnr_in']:.2f} dB -> out {report['psnr_out']:.2f} dB "
          f"(gain {report['psnr_gain']:+.2f} dB)")

    low, high = dataset[0]
    out, aux = forward(model, Tensor(low[None]), want_aux=True)
    save_image(Image.from_float(low), out_dir / "input_low.png")
    save_image(Image.from_float(high), out_dir / "reference.png")
    save_image(Image.from_float(out.data[0]), out_dir / "enhanced.png")
    save_checkpoint(model, out_dir / "demo.ckpt")
    prior = aux["prior"].map.data[0, 0]
    print(f"wrote {out_dir}/input_low.png, enhanced.png, reference.png, demo.ckpt")
    print(f"luminance prior range [{prior.min():.3f}, {prior.max():.3f}]")


if __name__ == "__main__":
    main()
