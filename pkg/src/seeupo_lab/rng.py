"""Labeled, splittable seeding.

Every random stream in the package is derived from a master seed plus a
component label and an index, so adding a new consumer never shifts the
draws of an existing one.
"""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master_seed: int, component: str, index: int = 0) -> int:
    """64-bit seed from (master seed, component label, index)."""
    text = f"{int(master_seed)}|{component}|{int(index)}".encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")


def make_rng(master_seed: int, component: str, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master_seed, component, index)))
