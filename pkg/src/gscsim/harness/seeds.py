"""Reproducible seed derivation: every stage and trial gets hash(root, stage, index)."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    digest = hashlib.blake2b(f"{int(root)}|{stage}|{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stage_rng(root: int, stage: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, stage, index))


def seed_list(root: int, stage: str, count: int, start: int = 0) -> list[int]:
    return [derive_seed(root, stage, i) for i in range(start, start + count)]
