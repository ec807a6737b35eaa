"""Counter-based random streams.

Every block of random parameters is drawn from a Philox generator keyed by
``(seed, stream_id)``.  Stream ids are derived by hashing labels, so the
numbers a sample receives depend only on where it sits (batch index, block
tag), never on how work is scheduled.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_stream_id(*labels) -> int:
    """Stable 64-bit id for a tuple of labels (ints / strings)."""
    h = hashlib.blake2b(repr(tuple(labels)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v!r}")

    def child(self, *labels) -> RngStream:
        return RngStream(int(self.seed), derive_stream_id(int(self.stream_id), *labels))

    def generator(self) -> np.random.Generator:
        key = np.array([int(self.seed), int(self.stream_id)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, *labels) -> int:
    """Seed for an independent sub-experiment (e.g. one sweep cell)."""
    return derive_stream_id(int(seed), "seed", *labels)
