"""Shared plumbing: content hashing, config fingerprints, seed derivation."""

from __future__ import annotations

import json
from typing import Any

import numpy as np

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    """64-bit FNV-1a over a byte string. Pass ``h`` to chain blocks."""
    prime = FNV_PRIME
    for b in data:
        h = ((h ^ b) * prime) & _MASK64
    return h


def fnv1a64_blocks(blocks: list[bytes]) -> int:
    h = FNV_OFFSET
    for block in blocks:
        h = fnv1a64(block, h)
    return h


def hash_hex(h: int) -> str:
    return f"{h:016x}"


def _canonical(obj: Any) -> Any:
    """Make an object JSON-stable: tuples to lists, numpy to python scalars."""
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_canonical(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def fingerprint(obj: Any) -> str:
    """Stable 16-hex-digit digest of any JSON-encodable configuration object."""
    payload = json.dumps(_canonical(obj), sort_keys=True, separators=(",", ":"))
    return hash_hex(fnv1a64(payload.encode("utf-8")))


def child_seed(seed: int, *tags: object) -> int:
    """Derive a stable sub-seed from a base seed and a tag path.

    Derivation is pure arithmetic (FNV over the rendered tag path), so the
    same (seed, tags) always maps to the same child regardless of call order.
    """
    text = f"{int(seed)}/" + "/".join(str(t) for t in tags)
    return fnv1a64(text.encode("utf-8")) & 0x7FFFFFFFFFFFFFFF


def rng_for(seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *tags))
