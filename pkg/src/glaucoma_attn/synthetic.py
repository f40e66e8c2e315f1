"""Synthetic two-class image tree (bright disc vs. plain background) for smoke runs.

    python -m glaucoma_attn.synthetic OUT_DIR [--per-class 32] [--size 96] [--seed 0]

writes ``OUT_DIR/glaucoma/*.png`` (with disc) and ``OUT_DIR/normal/*.png``.
"""
import argparse
from pathlib import Path

import numpy as np
from PIL import Image


def synthetic_image(rng: np.random.Generator, size: int, disc: bool) -> np.ndarray:
    base = np.array([150.0, 60.0, 40.0]) + rng.normal(0, 8, 3)
    img = np.broadcast_to(base, (size, size, 3)) + rng.normal(0, 12, (size, size, 3))
    if disc:
        r = rng.uniform(0.12, 0.2) * size
        cy, cx = rng.uniform(r, size - r, 2)
        yy, xx = np.mgrid[:size, :size]
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = np.array([245.0, 225.0, 170.0]) + rng.normal(0, 6, (int(mask.sum()), 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def make_synthetic_tree(root, per_class: int = 32, size: int = 96, seed: int = 0) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for cls, disc in (("glaucoma", True), ("normal", False)):
        (root / cls).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            Image.fromarray(synthetic_image(rng, size, disc)).save(root / cls / f"{cls}_{i:03d}.png")
    return root


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    print(make_synthetic_tree(a.out, a.per_class, a.size, a.seed))


if __name__ == "__main__":
    main()
