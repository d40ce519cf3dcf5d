"""Synthetic portrait dataset for desk-scale smoke tests and demos.

Images carry a learnable quality signal: within a scene, global brightness
and the sharpness of a central "face" rectangle increase with the quality
score, on top of a per-scene background color. The manifest follows the
standard column layout and marks the last images of each scene as the
validation split.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import MANIFEST_COLUMNS


def make_synthetic_image(
    path: Path,
    jod: float,
    scene_seed: int,
    noise_seed: int,
    size: tuple[int, int] = (128, 96),  # (width, height)
    face_frac: float = 0.4,
) -> tuple[int, int, int, int]:
    """Write one synthetic portrait; returns its face box (x, y, w, h).

    `jod` is expected in [-4, 0] (typical comparison-scale range); higher
    means brighter and cleaner.
    """
    width, height = size
    rng_scene = np.random.default_rng(scene_seed)
    rng_noise = np.random.default_rng(noise_seed)
    base = rng_scene.uniform(40, 120, size=3)  # scene-specific background color
    quality = np.clip((jod + 4.0) / 4.0, 0.0, 1.0)  # 0 worst .. 1 best

    img = np.ones((height, width, 3), dtype=np.float64) * base
    img += quality * 90.0  # brightness tracks quality
    noise = rng_noise.normal(0.0, 34.0 * (1.0 - quality), size=img.shape)
    img += noise

    fw, fh = int(width * face_frac), int(height * face_frac)
    fx, fy = (width - fw) // 2, (height - fh) // 2
    img[fy:fy + fh, fx:fx + fw] += 40.0  # face region is brighter than background

    arr = np.clip(img, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)
    return (fx, fy, fw, fh)


def generate_synthetic_dataset(
    root: str | Path,
    n_scenes: int = 3,
    train_per_scene: int = 4,
    val_per_scene: int = 3,
    size: tuple[int, int] = (128, 96),
    seed: int = 0,
    attribute: str = "overall",
    with_face_boxes: bool = True,
) -> Path:
    """Write images plus a manifest under `root`; returns the manifest path."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.csv"
    rng = np.random.default_rng(seed)

    rows = []
    for s in range(n_scenes):
        scene_id = f"scene{s:02d}"
        n = train_per_scene + val_per_scene
        jods = np.sort(rng.uniform(-4.0, 0.0, size=n))
        for i, jod in enumerate(jods):
            split = "train" if i < train_per_scene else "val"
            name = f"{scene_id}_{i:02d}.png"
            box = make_synthetic_image(
                root / "images" / name, float(jod),
                scene_seed=seed * 1000 + s,
                noise_seed=seed * 1000 + s * 100 + i,
                size=size)
            face = box if with_face_boxes else ("", "", "", "")
            rows.append([f"images/{name}", scene_id, split, attribute,
                         f"{float(jod):.6f}", *face])

    with manifest_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    return manifest_path
