"""Labeled random substreams fanned out from one integer seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *labels) -> np.random.Generator:
    """Independent generator for ``(seed, *labels)``.

    Labels may be strings or ints; the same tuple always yields the same
    stream, and different tuples never share state.
    """
    key = [zlib.crc32(str(label).encode()) for label in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))
