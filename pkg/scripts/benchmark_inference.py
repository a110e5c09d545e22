"""Per-sample sampling time against the number of DDIM steps.

Uses a trained run when ``--run`` is given, otherwise a freshly initialised
U-Net of the configured size (timing does not depend on the weights).
"""

from __future__ import annotations

import argparse
import csv
import sys

from kneerisk.ablation import benchmark_inference, timing_ratio
from kneerisk.config import load_config
from kneerisk.diffusion import UNet, UNetConfig, make_schedule
from kneerisk.pipeline import RunDir, load_unet


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=None)
    parser.add_argument("--run", default=None)
    parser.add_argument("--steps", type=int, nargs="+", default=[10, 50, 100, 250, 1000])
    parser.add_argument("--samples", type=int, default=3)
    parser.add_argument("--repeats", type=int, default=3, help="best-of-N per sample")
    parser.add_argument("--csv", default=None)
    args = parser.parse_args()

    cfg = load_config(args.config)
    if args.run:
        unet = load_unet(RunDir(args.run), ema=True)
    else:
        unet = UNet(UNetConfig(cfg.vqvae.latent_channels, cfg.diffusion.base_channels,
                               cfg.diffusion.attention_heads)).eval()
    size = cfg.dataset.phantom.image_size // cfg.vqvae.compression
    rows = benchmark_inference(unet, make_schedule(cfg.diffusion.timesteps), args.steps, args.samples,
                               (unet.cfg.latent_channels, size, size), repeats=args.repeats)
    out = open(args.csv, "w", newline="") if args.csv else sys.stdout
    writer = csv.DictWriter(out, fieldnames=["steps", "median_seconds"])
    writer.writeheader()
    writer.writerows(rows)
    if 100 in args.steps and 1000 in args.steps:
        print(f"ratio t(100)/t(1000) = {timing_ratio(rows):.4f}", file=sys.stderr)


if __name__ == "__main__":
    main()
