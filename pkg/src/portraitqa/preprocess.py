"""Image preprocessing: min-side resize, square crop, face extraction.

The model input pipeline is identical for the full image and the facial
crop: resize the minimum dimension to a target (default 448) preserving
aspect ratio, crop a square window (default 384, random during training,
centered during evaluation), scale to [0, 1], and normalize per channel.
"""

from __future__ import annotations

import random
import subprocess
from dataclasses import dataclass
from typing import Protocol, Sequence

import torch
from PIL import Image
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as tvf

from .dataset import FaceBox, PortraitRecord
from .errors import EmptyImage, ImageTooSmall, NoFaceFound

# Per-channel normalization expected by externally pre-trained
# vision-transformer weights, applied after scaling to [0, 1].
NORM_MEAN = (0.485, 0.456, 0.406)
NORM_STD = (0.229, 0.224, 0.225)

# Detector boxes are padded by this fraction on every side before cropping;
# quality cues (smoothing halos, bokeh boundaries) sit just outside tight
# face boxes. Manifest-supplied boxes are used as-is.
FACE_BOX_MARGIN = 0.25


@dataclass(frozen=True)
class PreprocessConfig:
    resize_min_dim: int = 448
    crop_size: int = 384
    mean: tuple[float, float, float] = NORM_MEAN
    std: tuple[float, float, float] = NORM_STD

    def __post_init__(self):
        if self.crop_size > self.resize_min_dim:
            raise ValueError(
                f"crop_size {self.crop_size} exceeds resize_min_dim {self.resize_min_dim}")


def load_image(path) -> Image.Image:
    with Image.open(path) as im:
        return im.convert("RGB")


def resize_min_side(image: Image.Image, target: int) -> Image.Image:
    """Resize so min(height, width) == target, preserving aspect ratio.

    Bilinear, antialiased. Returns the input unchanged when the minimum
    side already equals the target (which also makes the operation
    idempotent)."""
    w, h = image.size
    if w <= 0 or h <= 0:
        raise EmptyImage(f"image has empty extent {w}x{h}")
    if target <= 0:
        raise ValueError("target must be positive")
    if min(w, h) == target:
        return image
    if h <= w:
        out_h, out_w = target, int(round(w * target / h))
    else:
        out_h, out_w = int(round(h * target / w)), target
    return tvf.resize(
        image, [out_h, out_w], interpolation=InterpolationMode.BILINEAR, antialias=True)


def crop(image: Image.Image, size: int, mode: str, seed: int = 0) -> Image.Image:
    """Square crop: `center` is deterministic, `random` is seeded."""
    w, h = image.size
    if h < size or w < size:
        raise ImageTooSmall(f"image {h}x{w} smaller than crop size {size}")
    if mode == "center":
        top, left = (h - size) // 2, (w - size) // 2
    elif mode == "random":
        rng = random.Random(seed)
        top, left = rng.randint(0, h - size), rng.randint(0, w - size)
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return image.crop((left, top, left + size, top + size))


def to_model_tensor(image: Image.Image, cfg: PreprocessConfig) -> torch.Tensor:
    """HWC uint8 image -> normalized CHW float tensor."""
    t = tvf.to_tensor(image)
    return tvf.normalize(t, mean=list(cfg.mean), std=list(cfg.std))


def preprocess_image(
    image: Image.Image,
    cfg: PreprocessConfig,
    crop_mode: str,
    seed: int = 0,
) -> torch.Tensor:
    """Full pipeline: min-side resize, square crop, normalize."""
    resized = resize_min_side(image, cfg.resize_min_dim)
    cropped = crop(resized, cfg.crop_size, crop_mode, seed)
    return to_model_tensor(cropped, cfg)


# --- face extraction ---------------------------------------------------------

class FaceDetector(Protocol):
    """Given an image, return (box, confidence) pairs, best first."""

    def detect(self, image: Image.Image) -> list[tuple[FaceBox, float]]: ...


class NullFaceDetector:
    """Detector that never finds a face (forces manifest boxes or fallback)."""

    def detect(self, image: Image.Image) -> list[tuple[FaceBox, float]]:
        return []


class StaticFaceDetector:
    """Returns a fixed detection list; used to stub a real detector."""

    def __init__(self, detections: Sequence[tuple[FaceBox, float]]):
        self._detections = sorted(detections, key=lambda d: -d[1])

    def detect(self, image: Image.Image) -> list[tuple[FaceBox, float]]:
        return list(self._detections)


class ExternalFaceDetector:
    """Adapter for an out-of-process detector.

    Sends the image as PNG on the child's stdin and parses one detection
    per stdout line as `x y w h confidence` (whitespace or commas).
    """

    def __init__(self, command: Sequence[str]):
        self.command = list(command)

    def detect(self, image: Image.Image) -> list[tuple[FaceBox, float]]:
        import io

        buf = io.BytesIO()
        image.save(buf, format="PNG")
        proc = subprocess.run(
            self.command, input=buf.getvalue(), capture_output=True, check=True)
        detections: list[tuple[FaceBox, float]] = []
        for line in proc.stdout.decode().splitlines():
            line = line.strip().replace(",", " ")
            if not line:
                continue
            x, y, w, h, conf = line.split()
            detections.append(((int(float(x)), int(float(y)),
                                int(float(w)), int(float(h))), float(conf)))
        return sorted(detections, key=lambda d: -d[1])


def expand_box(box: FaceBox, margin: float, width: int, height: int) -> FaceBox:
    """Grow a box by `margin` of its size on each side, clamped to the image."""
    x, y, w, h = box
    dx, dy = int(round(w * margin)), int(round(h * margin))
    x0, y0 = max(0, x - dx), max(0, y - dy)
    x1, y1 = min(width, x + w + dx), min(height, y + h + dy)
    return (x0, y0, x1 - x0, y1 - y0)


def central_square_box(width: int, height: int) -> FaceBox:
    side = min(width, height)
    return ((width - side) // 2, (height - side) // 2, side, side)


@dataclass(frozen=True)
class FaceCrop:
    image: Image.Image
    box: FaceBox
    source: str  # "manifest" | "detector" | "fallback"


def extract_face(
    record: PortraitRecord,
    image: Image.Image,
    detector: FaceDetector,
    allow_fallback: bool = True,
) -> FaceCrop:
    """Crop the primary face region from the original-resolution image.

    Manifest boxes are cropped as-is (they are materialized with margin
    already applied at prepare time); detector boxes get FACE_BOX_MARGIN
    padding. With no box and no detection, falls back to a central square
    of side min(H, W), or raises NoFaceFound when fallback is disallowed.
    """
    width, height = image.size
    if record.face_box is not None:
        x, y, w, h = record.face_box
        box = (min(x, width - 1), min(y, height - 1),
               min(w, width - min(x, width - 1)), min(h, height - min(y, height - 1)))
        source = "manifest"
    else:
        detections = detector.detect(image)
        if detections:
            box = expand_box(detections[0][0], FACE_BOX_MARGIN, width, height)
            source = "detector"
        elif allow_fallback:
            box = central_square_box(width, height)
            source = "fallback"
        else:
            raise NoFaceFound(f"no face for {record.image_ref}")
    x, y, w, h = box
    return FaceCrop(image=image.crop((x, y, x + w, y + h)), box=box, source=source)
