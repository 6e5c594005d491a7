"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def substream(seed: int, *keys) -> np.random.Generator:
    """Generator for ``(seed, *keys)``; identical keys give identical streams."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys)))
