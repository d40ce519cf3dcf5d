"""Feature-extraction branches behind a uniform interface.

Two independent (non-Siamese) extractors are used: one over the whole
portrait and one over the facial crop, each mapping a normalized
B x 3 x H x W batch to a B x D feature matrix via global average pooling.
A small patch-embedding network serves as a desk-scale stand-in; a
Swin-B-class transformer adapter accepts externally pre-trained weights.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

from .errors import (
    ArchitectureMismatch,
    ChecksumMismatch,
    NonFiniteActivation,
    ShapeMismatch,
)


class FeatureExtractor(nn.Module):
    """Interface: forward(B x 3 x H x W) -> B x feature_dim."""

    @property
    def feature_dim(self) -> int:
        raise NotImplementedError

    def signature(self) -> str:
        """Architecture identity for weight-blob compatibility checks."""
        raise NotImplementedError


class ToyBackbone(FeatureExtractor):
    """Patch embedding + pointwise mixing + global average pool.

    Small enough for gradient checks and cpu overfit tests; handles any
    input size of at least one patch.
    """

    def __init__(self, feature_dim: int = 16, patch_size: int = 32, width: int = 24):
        super().__init__()
        self._feature_dim = feature_dim
        self.patch_size = patch_size
        self.width = width
        self.embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        self.mix = nn.Conv2d(width, width, kernel_size=1)
        self.act = nn.GELU()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.proj = nn.Linear(width, feature_dim)

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def signature(self) -> str:
        return f"toy-v1:d={self._feature_dim}:patch={self.patch_size}:w={self.width}"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.embed(x))
        h = self.act(self.mix(h))
        h = self.pool(h).flatten(1)
        return self.proj(h)


class SwinBackbone(FeatureExtractor):
    """Swin-B-class transformer with the classifier removed.

    Pooled feature dimension is 1024. Weights come in via load_weights;
    the module is randomly initialized otherwise.
    """

    def __init__(self):
        super().__init__()
        from torchvision.models import swin_b

        self.net = swin_b(weights=None)
        self._feature_dim = self.net.head.in_features
        self.net.head = nn.Identity()

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    def signature(self) -> str:
        return f"swin-b-v1:d={self._feature_dim}"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


BACKBONES = {"toy": ToyBackbone, "swin-b": SwinBackbone}


def build_backbone(name: str, feature_dim: int, seed: int) -> FeatureExtractor:
    """Construct a named backbone with seed-deterministic initialization."""
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}, expected one of {sorted(BACKBONES)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if name == "toy":
            return ToyBackbone(feature_dim=feature_dim)
        return SwinBackbone()


def extract_features(extractor: FeatureExtractor, batch: torch.Tensor) -> torch.Tensor:
    """Checked forward pass: validates input shape and output finiteness."""
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ShapeMismatch(f"expected B x 3 x H x W, got {tuple(batch.shape)}")
    out = extractor(batch)
    if out.shape != (batch.shape[0], extractor.feature_dim):
        raise ShapeMismatch(
            f"extractor produced {tuple(out.shape)}, "
            f"expected ({batch.shape[0]}, {extractor.feature_dim})")
    if not torch.all(torch.isfinite(out)):
        raise NonFiniteActivation("non-finite activations; weights may be corrupt")
    return out


# --- weight blobs -------------------------------------------------------------

@dataclass(frozen=True)
class BranchWeightsManifest:
    branch: str  # "full" | "facial"
    source: str  # provenance of the pre-training, e.g. "general-VQA-pretrained"
    checksum: str  # sha256 of the blob


def save_weights(
    extractor: FeatureExtractor, branch: str, source: str
) -> tuple[BranchWeightsManifest, bytes]:
    """Serialize parameters to an opaque blob plus its provenance manifest."""
    buf = io.BytesIO()
    torch.save(
        {
            "signature": extractor.signature(),
            "feature_dim": extractor.feature_dim,
            "state_dict": extractor.state_dict(),
        },
        buf,
    )
    blob = buf.getvalue()
    manifest = BranchWeightsManifest(
        branch=branch, source=source, checksum=hashlib.sha256(blob).hexdigest())
    return manifest, blob


def write_weights(path, manifest: BranchWeightsManifest, blob: bytes) -> None:
    """Blob to `path`, manifest to `path`.json."""
    Path(path).write_bytes(blob)
    Path(str(path) + ".json").write_text(json.dumps(asdict(manifest)), encoding="utf-8")


def read_weights(path) -> tuple[BranchWeightsManifest, bytes]:
    blob = Path(path).read_bytes()
    manifest = BranchWeightsManifest(
        **json.loads(Path(str(path) + ".json").read_text(encoding="utf-8")))
    return manifest, blob


def load_weights(
    extractor: FeatureExtractor, manifest: BranchWeightsManifest, blob: bytes
) -> FeatureExtractor:
    """Replace extractor parameters from a blob after checksum/signature checks."""
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest.checksum:
        raise ChecksumMismatch(f"blob sha256 {digest} != manifest {manifest.checksum}")
    payload = torch.load(io.BytesIO(blob), weights_only=True)
    if payload["signature"] != extractor.signature():
        raise ArchitectureMismatch(
            f"blob is for {payload['signature']!r}, extractor is {extractor.signature()!r}")
    if payload["feature_dim"] != extractor.feature_dim:
        raise ArchitectureMismatch(
            f"blob feature_dim {payload['feature_dim']} != {extractor.feature_dim}")
    extractor.load_state_dict(payload["state_dict"])
    return extractor
