"""Seed derivation, hashing, and canonical serialization helpers."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def derive_seed(seed: int, *tags) -> int:
    """Deterministic child seed from a base seed and string/int tags."""
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, int):
            words.append(tag & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf-8")) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def new_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *tags)))


def sha256_bytes(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
