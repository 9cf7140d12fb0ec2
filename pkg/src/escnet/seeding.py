"""Deterministic seed derivation.

All randomness in the library hangs off a single root seed. Substreams are
named, so adding a new consumer never shifts the draws of an existing one.
"""

import hashlib

import numpy as np
import torch


def substream(root_seed: int, name: str) -> int:
    """Derive a stable 63-bit seed for a named substream of `root_seed`."""
    digest = hashlib.blake2b(
        f"{root_seed}:{name}".encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & 0x7FFF_FFFF_FFFF_FFFF


def np_rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream(root_seed, name))


def torch_generator(root_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream(root_seed, name))
    return gen
