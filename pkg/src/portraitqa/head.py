"""Feature fusion and the quality regression head.

The three feature streams are concatenated in a fixed order (full image,
facial crop, prompt probabilities) and regressed to an unbounded scalar
score by a two-layer MLP. Absent streams are dropped from the
concatenation entirely, never zero-filled, so ablations keep honest input
statistics; the head's input width must match the configured streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import AllStreamsAbsent, DimMismatch, NonFiniteOutput


@dataclass(frozen=True)
class HeadConfig:
    input_dim: int
    hidden_dim: int = 128


@dataclass(frozen=True)
class FeatureBundle:
    """Concatenation of the present streams, order: full, facial, prompt."""

    f_full: torch.Tensor | None
    f_facial: torch.Tensor | None
    f_prompt: torch.Tensor | None
    concat: torch.Tensor


def fuse(
    f_full: torch.Tensor | None = None,
    f_facial: torch.Tensor | None = None,
    f_prompt: torch.Tensor | None = None,
) -> FeatureBundle:
    """Concatenate the supplied streams along the last dimension."""
    streams = [t for t in (f_full, f_facial, f_prompt) if t is not None]
    if not streams:
        raise AllStreamsAbsent("at least one feature stream must be supplied")
    ndims = {t.ndim for t in streams}
    if len(ndims) != 1:
        raise DimMismatch(f"streams disagree in rank: {sorted(ndims)}")
    if streams[0].ndim == 2:
        batches = {t.shape[0] for t in streams}
        if len(batches) != 1:
            raise DimMismatch(f"streams disagree in batch size: {sorted(batches)}")
    return FeatureBundle(
        f_full=f_full, f_facial=f_facial, f_prompt=f_prompt,
        concat=torch.cat(streams, dim=-1),
    )


class QualityHead(nn.Module):
    """Two-layer MLP: linear, GELU, linear to one unbounded score."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.input_dim, config.hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(config.hidden_dim, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(features))).squeeze(-1)


def build_head(config: HeadConfig, seed: int) -> QualityHead:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return QualityHead(config)


def predict_score(bundle: FeatureBundle, head: QualityHead) -> torch.Tensor:
    """Checked scoring: validates width against the head and output finiteness."""
    if bundle.concat.shape[-1] != head.config.input_dim:
        raise DimMismatch(
            f"bundle width {bundle.concat.shape[-1]} != head input_dim "
            f"{head.config.input_dim}")
    score = head(bundle.concat)
    if not torch.all(torch.isfinite(score)):
        raise NonFiniteOutput("head produced a non-finite score")
    return score
