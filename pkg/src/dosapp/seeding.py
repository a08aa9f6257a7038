"""Named RNG substreams derived from one master seed.

Every random draw in a run comes from substream(seed, *names) so that the
master seed plus a stable name fully determines it, independent of call
order elsewhere in the program.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, *names: str) -> np.random.Generator:
    """Generator keyed by (seed, names); same inputs give identical streams."""
    digest = hashlib.sha256("/".join(names).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + words))
