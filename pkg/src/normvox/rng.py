"""Seeded random streams.

Every stochastic step derives its own counter-based (Philox) stream from
(seed, stream tag, optional indices such as a bin number). Draws in one
stream never depend on how many draws another stream made, so per-bin
selections are reproducible regardless of evaluation order.
"""

import numpy as np

# Stable tag -> integer mapping; extending is fine, reordering is not
# (it would silently change every derived stream).
_STREAM_TAGS = {
    "cap": 0,
    "nd": 1,
    "fov": 2,
    "bin": 3,
    "random": 4,
    "fps": 5,
    "scene": 6,
    "fusion": 7,
}

_U64 = (1 << 64) - 1


def derive_rng(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return the Philox generator for stream (seed, tag, *indices)."""
    if tag not in _STREAM_TAGS:
        raise ValueError(f"unknown stream tag {tag!r}; known: {sorted(_STREAM_TAGS)}")
    ss = np.random.SeedSequence(
        entropy=int(seed) & _U64,
        spawn_key=(_STREAM_TAGS[tag], *[int(i) for i in indices]),
    )
    return np.random.Generator(np.random.Philox(ss))
