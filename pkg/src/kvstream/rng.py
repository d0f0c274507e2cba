"""Counter-based, keyed random streams.

Every weight tensor draws from its own Philox stream keyed by
``(seed, *labels)``, so a tensor's contents never depend on the order in
which other tensors were generated.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _label_word(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode())
    return int(label) & MASK64


def keyed_generator(seed: int, *labels) -> np.random.Generator:
    entropy = [int(seed) & MASK64] + [_label_word(x) for x in labels]
    ss = np.random.SeedSequence(entropy)
    key = ss.generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def keyed_uniform(seed: int, labels: tuple, shape, bound: float) -> np.ndarray:
    return keyed_generator(seed, *labels).uniform(-bound, bound, size=shape)
