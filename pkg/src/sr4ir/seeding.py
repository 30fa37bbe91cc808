"""Named random sub-streams derived from one integer seed."""

import hashlib

import numpy as np


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(seed, names...)``.

    Names may be strings or non-negative ints; the same arguments always
    give the same stream, and different names never share state.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for n in names:
        if isinstance(n, str):
            words.extend(_name_words(n))
        else:
            n = int(n)
            if n < 0:
                raise ValueError("integer stream names must be non-negative")
            words.extend([n & 0xFFFFFFFF, (n >> 32) & 0xFFFFFFFF])
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))
