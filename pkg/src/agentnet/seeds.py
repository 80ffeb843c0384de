"""Deterministic seed derivation.

A single master seed drives every run. Per-query, per-step, and per-agent
seeds are split off with a hash so that concurrent execution order can never
influence randomness, and so that the presentation-shuffle stream stays
independent from the behavior stream.
"""

import hashlib


def derive_seed(*parts) -> int:
    """Derive a 64-bit seed from an arbitrary tuple of hashable parts."""
    key = ":".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return int.from_bytes(digest[:8], "big")
