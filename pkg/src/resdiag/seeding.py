"""Named random substreams.

Every source of randomness in a run (splitting, init, noise, per-epoch
edge flips, shuffles) draws from its own substream derived from the one
root seed plus a purpose string, so adding a consumer never perturbs the
others and runs stay reproducible across platforms.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Generator for the substream ``name`` under ``root_seed``."""
    if root_seed < 0:
        raise ValueError(f"root seed must be non-negative, got {root_seed}")
    seq = np.random.SeedSequence([int(root_seed), *_name_words(name)])
    return np.random.default_rng(seq)


def derive_seed(root_seed: int, name: str) -> int:
    """Stable integer seed for the substream, for APIs that take a plain int."""
    return int(substream(root_seed, name).integers(0, 2**63 - 1))
