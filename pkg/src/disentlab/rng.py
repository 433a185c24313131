"""Named, splittable random streams.

Each stream is a Philox counter-based generator keyed by ``(seed, label,
*indices)``. Dataset sampling, weight initialization, batch order and
permutation draws therefore never share state, and per-sample streams can be
created in any order (or in parallel) with identical results.
"""

import hashlib

import numpy as np


def _label_words(label):
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


class Rng:
    def __init__(self, seed, label="root", path=()):
        if not isinstance(seed, (int, np.integer)) or seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an integer in [0, 2**64), got {seed!r}")
        self.seed = int(seed)
        self.label = label
        self.path = tuple(int(i) for i in path)
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_label_words(label)) + self.path
        )
        self.generator = np.random.Generator(np.random.Philox(ss))

    def stream(self, label):
        """Independent stream named ``label`` under the same seed."""
        return Rng(self.seed, f"{self.label}/{label}", self.path)

    def child(self, index):
        """Independent stream for element ``index`` (e.g. a sample id)."""
        return Rng(self.seed, self.label, self.path + (index,))

    def __repr__(self):
        return f"Rng(seed={self.seed}, label={self.label!r}, path={self.path})"

    # thin pass-throughs so callers rarely reach for .generator
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)
