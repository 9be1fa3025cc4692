"""Named, splittable random streams on top of a counter-based generator.

Every stochastic operation in the package takes an explicit key; there is no
global RNG state. Keys are derived by hashing a root seed together with a
path of names, so streams are stable across platforms and thread counts.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RngKey:
    """A point in a deterministic key tree.

    ``child()`` derives independent sub-keys by name; ``generator()`` yields a
    fresh Philox generator for this node. Calling ``generator()`` twice on the
    same node returns identically seeded generators, so a node should be
    consumed once (split further for more draws).
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(str(n) for n in path)

    def child(self, *names) -> "RngKey":
        return RngKey(self.seed, self.path + tuple(str(n) for n in names))

    def _digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(str(self.seed).encode())
        for name in self.path:
            h.update(b"/")
            h.update(name.encode())
        return h.digest()

    def generator(self) -> np.random.Generator:
        key = np.frombuffer(self._digest(), dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    # Convenience draws; each consumes this node exactly once.
    def normal(self, shape, scale=1.0, dtype=np.float32) -> np.ndarray:
        g = self.generator()
        return (g.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        g = self.generator()
        return g.uniform(low, high, shape).astype(dtype)

    def integers(self, low, high, shape=None) -> np.ndarray:
        return self.generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator().permutation(n)

    def __repr__(self) -> str:
        return f"RngKey(seed={self.seed}, path={'/'.join(self.path)})"
