"""Scene/distortion/quality prompt lattice and probability features.

A fixed grid of 9 scene categories x 11 distortion types x 5 quality
levels yields 495 text prompts of the form

    "a photo of a(n) {scene} with {distortion} artifacts, which is of
     {level} quality"

A contrastive image-text embedding provider scores the image against every
prompt; a softmax over the 495 scaled cosine similarities gives a
probability vector whose marginals describe scene type, artifact type,
and quality level.

Index order is frozen: scene-major, then distortion, then quality level,
so index(s, d, c) = s*55 + d*5 + c. Feature positions are therefore stable
across checkpoint reloads; the grid hash is stored in checkpoints to catch
accidental reordering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .errors import DimensionMismatch

SCENES = (
    "animal", "cityscape", "human", "indoor scene", "landscape",
    "night scene", "plant", "still-life", "others",
)
DISTORTIONS = (
    "blur", "color-related", "contrast", "JPEG compression",
    "JPEG2000 compression", "noise", "overexposure", "quantization",
    "under-exposure", "spatially-localized", "others",
)
LEVELS = ("bad", "poor", "fair", "good", "perfect")
LEVEL_VALUES = (1, 2, 3, 4, 5)

_VOWELS = "aeiou"


def _article(noun: str) -> str:
    return "an" if noun[0].lower() in _VOWELS else "a"


def render_prompt(scene: str, distortion: str, level: str) -> str:
    return (f"a photo of {_article(scene)} {scene} with {distortion} artifacts, "
            f"which is of {level} quality")


@dataclass(frozen=True)
class PromptGrid:
    scenes: tuple[str, ...]
    distortions: tuple[str, ...]
    levels: tuple[str, ...]
    prompts: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.prompts)

    def index(self, s: int, d: int, c: int) -> int:
        if not (0 <= s < len(self.scenes) and 0 <= d < len(self.distortions)
                and 0 <= c < len(self.levels)):
            raise IndexError(f"triple out of range: {(s, d, c)}")
        return (s * len(self.distortions) + d) * len(self.levels) + c

    def triple(self, index: int) -> tuple[int, int, int]:
        if not 0 <= index < self.size:
            raise IndexError(f"prompt index out of range: {index}")
        s, rest = divmod(index, len(self.distortions) * len(self.levels))
        d, c = divmod(rest, len(self.levels))
        return (s, d, c)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.prompts).encode("utf-8")).hexdigest()


def build_grid() -> PromptGrid:
    prompts = tuple(
        render_prompt(s, d, c)
        for s in SCENES for d in DISTORTIONS for c in LEVELS
    )
    return PromptGrid(scenes=SCENES, distortions=DISTORTIONS, levels=LEVELS,
                      prompts=prompts)


def export_prompts(grid: PromptGrid, path: str | Path) -> None:
    """One prompt per line, index order, for auditing."""
    Path(path).write_text("\n".join(grid.prompts) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class PromptFeatures:
    probs: np.ndarray  # shape (495,), nonnegative, sums to 1

    def __post_init__(self):
        if self.probs.ndim != 1:
            raise DimensionMismatch("probs must be a vector")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-6:
            raise ValueError("probs must be a probability vector")


class EmbeddingProvider(Protocol):
    """Maps images and prompt strings to unit-norm embeddings."""

    logit_scale: float
    concurrent_safe: bool

    def embed_image(self, image: Image.Image) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


class HashEmbeddingProvider:
    """Deterministic stub provider for tests and offline runs.

    Embeddings are unit Gaussian vectors seeded from a sha256 of the prompt
    text (or of the image's size and pixel bytes), so results are stable
    across processes and platforms without any pretrained model.
    """

    concurrent_safe = True

    def __init__(self, dim: int = 64, logit_scale: float = 100.0):
        self.dim = dim
        self.logit_scale = float(logit_scale)
        self._text_cache: dict[str, np.ndarray] = {}

    def _unit_vector(self, key: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def embed_image(self, image: Image.Image) -> np.ndarray:
        key = b"image:%dx%d:" % image.size + image.tobytes()
        return self._unit_vector(key)

    def embed_text(self, text: str) -> np.ndarray:
        if text not in self._text_cache:
            self._text_cache[text] = self._unit_vector(b"text:" + text.encode("utf-8"))
        return self._text_cache[text]


class ClipEmbeddingProvider:
    """Optional adapter for a contrastive vision-language checkpoint.

    Requires the `transformers` package and a local or hub model id; not
    exercised by the test suite (no pretrained weights are shipped).
    """

    concurrent_safe = False

    def __init__(self, model_id: str, device: str = "cpu"):
        from transformers import CLIPModel, CLIPProcessor

        self._model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self._processor = CLIPProcessor.from_pretrained(model_id)
        self._device = device
        self.logit_scale = float(self._model.logit_scale.exp().item())

    def embed_image(self, image: Image.Image) -> np.ndarray:
        import torch

        inputs = self._processor(images=image, return_tensors="pt").to(self._device)
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)[0]
        v = feats.cpu().numpy().astype(np.float64)
        return v / np.linalg.norm(v)

    def embed_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        inputs = {k: v.to(self._device) for k, v in inputs.items()}
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)[0]
        v = feats.cpu().numpy().astype(np.float64)
        return v / np.linalg.norm(v)


def _stable_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def compute_prompt_features(
    image: Image.Image,
    grid: PromptGrid,
    provider: EmbeddingProvider,
) -> PromptFeatures:
    """Softmax over logit-scaled cosine similarities of image vs all prompts."""
    img_vec = np.asarray(provider.embed_image(image), dtype=np.float64)
    text_mat = np.stack([
        np.asarray(provider.embed_text(p), dtype=np.float64) for p in grid.prompts
    ])
    if text_mat.shape[1] != img_vec.shape[0]:
        raise DimensionMismatch(
            f"text dim {text_mat.shape[1]} != image dim {img_vec.shape[0]}")
    sims = text_mat @ img_vec
    return PromptFeatures(probs=_stable_softmax(provider.logit_scale * sims))


def marginals(
    features: PromptFeatures, grid: PromptGrid
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(scene, distortion, quality-level) marginals and expected quality level.

    Expected quality is the probability-weighted mean of the level values
    1..5, i.e. 1.0 means all mass on "bad" and 5.0 all mass on "perfect".
    """
    cube = features.probs.reshape(
        len(grid.scenes), len(grid.distortions), len(grid.levels))
    scene_m = cube.sum(axis=(1, 2))
    distortion_m = cube.sum(axis=(0, 2))
    quality_m = cube.sum(axis=(0, 1))
    expected_quality = float(np.dot(np.array(LEVEL_VALUES, dtype=np.float64), quality_m))
    return scene_m, distortion_m, quality_m, expected_quality
