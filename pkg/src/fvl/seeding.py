"""Splittable deterministic RNG derivation.

Every stochastic component draws from a generator derived from the root
seed plus a path of string/int keys. Derivation is stateless, so workers
can be seeded independently and in any order while producing identical
results, and a resumed run can rebuild the exact stream for iteration k
without replaying iterations 0..k-1.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(root_seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([_key_to_int(root_seed)] + [_key_to_int(k) for k in keys])


def derive_rng(root_seed: int, *keys) -> np.random.Generator:
    """Independent numpy generator for the (root_seed, *keys) path."""
    return np.random.default_rng(seed_sequence(root_seed, *keys))


def derive_torch_seed(root_seed: int, *keys) -> int:
    """64-bit torch seed for the (root_seed, *keys) path."""
    state = seed_sequence(root_seed, *keys).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def seed_torch(root_seed: int, *keys) -> None:
    torch.manual_seed(derive_torch_seed(root_seed, *keys))
