"""Small shared helpers: stable hashing, seed derivation, worker limits."""

from __future__ import annotations

import hashlib
import os

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int) -> int:
    """Derive a decorrelated per-item seed from (master seed, index).

    Standard splitmix64 finalizer over seed + (index+1)*golden-gamma; documented
    so dataset generation is reproducible from the manifest alone.
    """
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of UTF-8 text; stable across runs and platforms."""
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def worker_limit(default: int = 1) -> int:
    """Parallelism cap from the DYADGEN/ECHO_NUM_WORKERS environment variables."""
    for var in ("ECHO_NUM_WORKERS", "DYADGEN_NUM_WORKERS"):
        val = os.environ.get(var)
        if val:
            try:
                return max(1, int(val))
            except ValueError:
                raise ValueError(f"{var} must be an integer, got {val!r}")
    return default
