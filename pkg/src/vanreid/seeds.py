"""Named deterministic random streams.

Every stochastic site draws from its own generator, keyed by the root seed
plus a stable hash of the stream name, so adding a consumer never shifts the
draws seen by another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["seed_stream", "derive_seed"]


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([root_seed, key])))


def derive_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit integer seed for one named site under the root seed.

    The integer form is for seeds that get recorded in artifacts (manifests,
    logs) so the site can be replayed in isolation.
    """
    digest = hashlib.sha256(f"{root_seed}/{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
