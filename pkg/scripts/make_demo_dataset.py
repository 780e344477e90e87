#!/usr/bin/env python3
"""Build a self-contained demo dataset: procedural clean images plus
synthesized degraded/clean training pairs.

Usage:
    python scripts/make_demo_dataset.py --out demo_data [--count 8] [--size 64]
                                        [--profile low_light] [--seed 0]

Writes demo_data/clean/*.png and demo_data/pairs/{input,target,raw,params}_*.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from iat.cli import main as iat_main
from iat.image_io import ImageRGB, save_image
from iat.rng import philox


def procedural_clean(rng, size: int) -> ImageRGB:
    """Smooth random scene: blurred luma field plus a few soft color blobs."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    luma = np.zeros((size, size))
    for _ in range(4):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.15, 0.5)
        luma += rng.uniform(0.2, 0.9) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)
        )
    luma = 0.15 + 0.75 * (luma - luma.min()) / (np.ptp(luma) + 1e-9)
    img = np.repeat(luma[:, :, None], 3, axis=2)
    for _ in range(3):  # gentle chroma blobs
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.1, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        tint = rng.uniform(-0.12, 0.12, 3)
        img += blob[:, :, None] * tint[None, None, :]
    return ImageRGB(np.clip(img, 0.0, 1.0).astype(np.float32))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--clean-count", type=int, default=4)
    ap.add_argument("--profile", default="low_light")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    clean_dir = out / "clean"
    clean_dir.mkdir(parents=True, exist_ok=True)
    rng = philox(args.seed, 100)
    for i in range(args.clean_count):
        save_image(procedural_clean(rng, args.size), clean_dir / f"scene_{i:03d}.png")
    print(f"wrote {args.clean_count} clean images to {clean_dir}")

    return iat_main(
        [
            "synthesize",
            "--clean", str(clean_dir),
            "--out", str(out / "pairs"),
            "--profile", args.profile,
            "--count", str(args.count),
            "--seed", str(args.seed),
        ]
    )


if __name__ == "__main__":
    sys.exit(main())
