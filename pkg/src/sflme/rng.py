"""Named, order-independent random streams derived from one root seed.

Every consumer asks for a stream by name (``"init/victim"``,
``"shuffle/client3/epoch5"``). The stream's key is a hash of the root seed
and the name, and the generator is counter-based (Philox), so the numbers a
consumer sees never depend on which other consumers ran first.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _name_words(name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class Streams:
    def __init__(self, root_seed: int, prefix: str = "") -> None:
        if root_seed < 0:
            raise ValueError("root seed must be non-negative")
        self.root_seed = int(root_seed)
        self.prefix = prefix

    def child(self, name: str) -> Streams:
        return Streams(self.root_seed, f"{self.prefix}{name}/")

    def generator(self, name: str) -> np.random.Generator:
        seq = np.random.SeedSequence([self.root_seed, *_name_words(self.prefix + name)])
        return np.random.Generator(np.random.Philox(seq))

    def seed_int(self, name: str) -> int:
        return int(self.generator(name).integers(0, 2**63 - 1))

    def uniform(self, name: str, shape, low=0.0, high=1.0, dtype=torch.float32) -> torch.Tensor:
        arr = self.generator(name).uniform(low, high, size=shape)
        return torch.from_numpy(arr).to(dtype)

    def normal(self, name: str, shape, dtype=torch.float32) -> torch.Tensor:
        arr = self.generator(name).standard_normal(size=shape)
        return torch.from_numpy(arr).to(dtype)

    def permutation(self, name: str, n: int) -> np.ndarray:
        return self.generator(name).permutation(n)
