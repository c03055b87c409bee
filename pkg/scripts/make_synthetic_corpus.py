#!/usr/bin/env python3
"""Write a seeded synthetic corpus (noise images, labelled boxes, QA) to disk."""

import argparse

from roivqa.synthetic import make_dataset, write_dataset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--images", type=int, default=50)
    ap.add_argument("--regions", type=int, default=3, help="regions per image")
    ap.add_argument("--qa", type=int, default=2, help="original QA pairs per image")
    ap.add_argument("--size", type=int, default=128, help="square image side in pixels")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    d = make_dataset(args.images, args.regions, args.qa, size=args.size, seed=args.seed)
    path = write_dataset(d, args.out_dir)
    print(f"wrote {path}: {len(d.images)} images, {sum(map(len, d.regions.values()))} regions, {len(d.qa)} qa")


if __name__ == "__main__":
    main()
