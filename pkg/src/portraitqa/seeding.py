"""Deterministic seed derivation and global RNG setup."""

from __future__ import annotations

import hashlib
import random

import numpy as np
import torch


def derive_seed(base: int, *parts) -> int:
    """Derive a child seed from a base seed and a tag sequence.

    Stable across processes and platforms (sha256-based, no Python hash
    randomization), so data-pipeline randomness can be stateless: every
    consumer recomputes its own seed from (base, tags) instead of sharing
    a mutable RNG.
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest()[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def seed_everything(seed: int, deterministic: bool = False) -> None:
    """Seed python/numpy/torch global RNGs; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False
