"""Named, order-independent random substreams derived from one master seed."""

from __future__ import annotations

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def substream(seed: int, *path) -> np.random.SeedSequence:
    """SeedSequence for ``seed`` at a named path such as ``("dropout", 3)``.

    Derivation depends only on ``(seed, path)``, never on how many other
    streams were requested before, so results are schedule-independent.
    """
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_word(p) for p in path))


def generator(seed: int, *path) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *path))
