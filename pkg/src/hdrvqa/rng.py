"""Named random substreams derived from a single root seed."""
import hashlib

import numpy as np


def substream(seed, name):
    """Return a Generator for stream ``name`` under ``seed``.

    Streams with different names are statistically independent and stable
    across processes and platforms (no reliance on Python's ``hash``).
    """
    key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))
