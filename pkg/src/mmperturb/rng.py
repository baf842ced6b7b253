"""Named random substreams derived from one global seed.

Each stream is keyed by a name (e.g. ``"init"``, ``"curriculum"``) plus
optional integers, so runs that differ only in fusion mechanics still share
data and initialization draws.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "curriculum", "reparam", "teacher", "eval", "split", "classifier")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = (zlib.crc32(name.encode("ascii")),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
