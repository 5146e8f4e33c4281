"""Named random streams derived from one master seed.

Each component asks for its own stream by name, so changing how many draws
one component makes never shifts another component's randomness.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(master_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), _name_key(name)]))
