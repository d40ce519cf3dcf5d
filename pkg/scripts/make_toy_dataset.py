#!/usr/bin/env python3
"""Generate a synthetic portrait dataset with a learnable quality signal.

Example:
    python scripts/make_toy_dataset.py data/toy --scenes 4 --train 6 --val 3
"""

import argparse

from portraitqa.synthetic import generate_synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", help="output directory")
    parser.add_argument("--scenes", type=int, default=3)
    parser.add_argument("--train", type=int, default=4, help="train images per scene")
    parser.add_argument("--val", type=int, default=3, help="val images per scene")
    parser.add_argument("--width", type=int, default=128)
    parser.add_argument("--height", type=int, default=96)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-face-boxes", action="store_true",
                        help="leave the face columns empty (exercise fallback)")
    args = parser.parse_args()

    manifest = generate_synthetic_dataset(
        args.root,
        n_scenes=args.scenes,
        train_per_scene=args.train,
        val_per_scene=args.val,
        size=(args.width, args.height),
        seed=args.seed,
        with_face_boxes=not args.no_face_boxes,
    )
    print(manifest)


if __name__ == "__main__":
    main()
