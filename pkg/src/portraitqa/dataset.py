"""Manifest ingestion, validation, scene grouping, and pair sampling.

A manifest is UTF-8 CSV with a header row and the columns

    image_path, scene_id, split, attribute, jod, face_x, face_y, face_w, face_h

where the four face columns are either all filled or all empty for a row.
Relative image paths are resolved against the manifest's directory.
Quality labels (JOD scores) are comparable only within a scene, so
training pairs are always drawn from a single scene.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import (
    DuplicateImageRef,
    MalformedRow,
    MissingFile,
    NonFiniteInput,
    NoValidScene,
)

ATTRIBUTES = ("overall", "exposure", "details")
SPLITS = ("train", "val", "test")

MANIFEST_COLUMNS = (
    "image_path", "scene_id", "split", "attribute", "jod",
    "face_x", "face_y", "face_w", "face_h",
)

FaceBox = tuple[int, int, int, int]  # (x, y, w, h) in pixels


@dataclass(frozen=True)
class PortraitRecord:
    image_ref: Path
    scene_id: str
    jod: float
    attribute: str
    split: str
    face_box: FaceBox | None = None


@dataclass(frozen=True)
class PairSample:
    x: PortraitRecord
    y: PortraitRecord
    label: int


def binary_label(q_x: float, q_y: float) -> int:
    """Preference label for the ordered pair (x, y): 1 iff q_x >= q_y.

    The polarity agrees with the pairwise probability model, which exceeds
    0.5 exactly when the predicted score of x exceeds that of y.
    """
    if not (math.isfinite(q_x) and math.isfinite(q_y)):
        raise NonFiniteInput(f"non-finite quality score ({q_x!r}, {q_y!r})")
    return 1 if q_x >= q_y else 0


def _parse_face_box(row: dict, row_no: int) -> FaceBox | None:
    cells = [str(row[k] or "").strip() for k in ("face_x", "face_y", "face_w", "face_h")]
    filled = [c for c in cells if c != ""]
    if not filled:
        return None
    if len(filled) != 4:
        raise MalformedRow(row_no, "face box must fill all four columns or none")
    try:
        x, y, w, h = (int(float(c)) for c in cells)
    except ValueError:
        raise MalformedRow(row_no, f"face box not numeric: {cells}")
    if w <= 0 or h <= 0 or x < 0 or y < 0:
        raise MalformedRow(row_no, f"face box has non-positive extent: {(x, y, w, h)}")
    return (x, y, w, h)


def _check_face_box_in_image(box: FaceBox, image_path: Path, row_no: int) -> None:
    try:
        with Image.open(image_path) as im:
            width, height = im.size
    except Exception as exc:
        raise MalformedRow(row_no, f"cannot read image header: {exc}")
    x, y, w, h = box
    if x + w > width or y + h > height:
        raise MalformedRow(
            row_no,
            f"face box {box} exceeds image bounds {width}x{height}",
        )


def _parse_row(row: dict, row_no: int, base_dir: Path,
               attribute: str) -> PortraitRecord | None:
    """Validate one manifest row; None when it belongs to another attribute."""
    if any(row.get(k) is None for k in MANIFEST_COLUMNS):
        raise MalformedRow(row_no, "wrong number of fields")
    row_attr = row["attribute"].strip()
    if row_attr not in ATTRIBUTES:
        raise MalformedRow(row_no, f"unknown attribute {row_attr!r}")
    split = row["split"].strip()
    if split not in SPLITS:
        raise MalformedRow(row_no, f"unknown split {split!r}")
    try:
        jod = float(row["jod"])
    except ValueError:
        raise MalformedRow(row_no, f"jod not numeric: {row['jod']!r}")
    if not math.isfinite(jod):
        raise MalformedRow(row_no, f"jod not finite: {jod!r}")
    scene_id = row["scene_id"].strip()
    if not scene_id:
        raise MalformedRow(row_no, "empty scene_id")
    face_box = _parse_face_box(row, row_no)

    if row_attr != attribute:
        return None

    image_ref = Path(row["image_path"].strip())
    if not image_ref.is_absolute():
        image_ref = base_dir / image_ref
    if not (image_ref.is_file() and os.access(image_ref, os.R_OK)):
        raise MalformedRow(row_no, f"image not readable: {image_ref}")
    if face_box is not None:
        _check_face_box_in_image(face_box, image_ref, row_no)
    return PortraitRecord(
        image_ref=image_ref,
        scene_id=scene_id,
        jod=jod,
        attribute=row_attr,
        split=split,
        face_box=face_box,
    )


def iter_manifest(path: str | Path, attribute: str,
                  images_root: str | Path | None = None):
    """Lenient per-row iteration: yields (row_no, record, error).

    Exactly one of record/error is set per invalid or matching row; rows of
    other attributes that parse cleanly are skipped. The header must still
    be well-formed (raises MalformedRow otherwise) and the file must exist
    (MissingFile). Relative image paths resolve against `images_root`,
    defaulting to the manifest's directory.
    """
    path = Path(path)
    if attribute not in ATTRIBUTES:
        raise ValueError(f"unknown attribute {attribute!r}, expected one of {ATTRIBUTES}")
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base_dir = Path(images_root) if images_root is not None else path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MalformedRow(1, "empty manifest")
        if set(reader.fieldnames) != set(MANIFEST_COLUMNS):
            raise MalformedRow(
                1,
                f"header must be exactly {list(MANIFEST_COLUMNS)}, got {reader.fieldnames}",
            )
        for row in reader:
            row_no = reader.line_num
            try:
                record = _parse_row(row, row_no, base_dir, attribute)
            except MalformedRow as exc:
                yield row_no, None, exc
                continue
            if record is not None:
                yield row_no, record, None


def load_manifest(path: str | Path, attribute: str,
                  images_root: str | Path | None = None) -> list[PortraitRecord]:
    """Load and validate all records of one attribute from a manifest file.

    Raises MalformedRow (with the offending line number) on the first
    invalid row, DuplicateImageRef on repeated image paths within the
    attribute, MissingFile if the manifest itself is absent.
    """
    records: list[PortraitRecord] = []
    seen: set[Path] = set()
    for row_no, record, error in iter_manifest(path, attribute, images_root):
        if error is not None:
            raise error
        if record.image_ref in seen:
            raise DuplicateImageRef(
                f"duplicate image path {record.image_ref} (row {row_no})")
        seen.add(record.image_ref)
        records.append(record)
    return records


def split_records(records: Sequence[PortraitRecord], split: str) -> list[PortraitRecord]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [r for r in records if r.split == split]


@dataclass(frozen=True)
class SceneIndex:
    """Scene id -> indices into the record list it was built from."""

    buckets: dict[str, tuple[int, ...]]

    @classmethod
    def build(cls, records: Sequence[PortraitRecord]) -> "SceneIndex":
        buckets: dict[str, list[int]] = {}
        for i, rec in enumerate(records):
            buckets.setdefault(rec.scene_id, []).append(i)
        return cls(buckets={k: tuple(v) for k, v in buckets.items()})

    def counts(self) -> dict[str, int]:
        return {k: len(v) for k, v in self.buckets.items()}

    def pair_counts(self) -> dict[str, int]:
        """Distinct unordered pairs per scene: n*(n-1)/2."""
        return {k: len(v) * (len(v) - 1) // 2 for k, v in self.buckets.items()}


def sample_pairs(
    index: SceneIndex,
    records: Sequence[PortraitRecord],
    n_pairs: int,
    seed: int,
) -> list[PairSample]:
    """Draw n_pairs within-scene pairs, reproducibly for a given seed.

    Scenes are chosen with probability proportional to their number of
    distinct pairs; the two members are then drawn uniformly without
    replacement inside the chosen scene.
    """
    if n_pairs <= 0:
        raise ValueError("n_pairs must be positive")
    scenes = sorted(k for k, c in index.pair_counts().items() if c > 0)
    if not scenes:
        raise NoValidScene("every scene has fewer than 2 records")
    weights = np.array([index.pair_counts()[s] for s in scenes], dtype=np.float64)
    weights /= weights.sum()

    rng = np.random.default_rng(seed)
    out: list[PairSample] = []
    for _ in range(n_pairs):
        scene = scenes[int(rng.choice(len(scenes), p=weights))]
        ia, ib = rng.choice(len(index.buckets[scene]), size=2, replace=False)
        x = records[index.buckets[scene][int(ia)]]
        y = records[index.buckets[scene][int(ib)]]
        out.append(PairSample(x=x, y=y, label=binary_label(x.jod, y.jod)))
    return out
