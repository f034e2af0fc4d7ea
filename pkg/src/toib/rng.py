"""Named random substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """Generator keyed by ``seed`` and a path of names/ints.

    Keys are hashed with CRC32, so adding a new consumer never shifts the
    draws seen by existing ones.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
