"""Deterministic RNG fan-out.

Every random stream in the pipeline is derived from one global seed plus a
purpose tag (and usually an utterance id), so adding or removing utterances
never perturbs unrelated streams.
"""

import hashlib

import numpy as np


def derive_seed(*parts) -> int:
    """Hash (seed, tag, id, ...) into a 64-bit seed."""
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Independent generator for a derived stream."""
    return np.random.default_rng(derive_seed(*parts))
