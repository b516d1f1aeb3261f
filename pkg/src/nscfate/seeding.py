"""Deterministic seed derivation.

All randomness in a run flows from one 64-bit root seed. Component streams
are derived by hashing (root_seed, label), so each component is reproducible
in isolation and adding components never perturbs existing ones.
"""

import hashlib

import numpy as np

# Documented derivation labels; components must use these, never ad-hoc ones.
LABEL_SPLIT = "split"
LABEL_INIT = "init"
LABEL_SHUFFLE = "shuffle"
LABEL_DROPOUT = "dropout"
LABEL_GENERATION = "generation"
LABEL_SAMPLING = "sampling"


def hash64(*parts) -> int:
    """Hash arbitrary parts to a uniform unsigned 64-bit integer."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def unit_hash(*parts) -> float:
    """Hash parts to a float in [0, 1)."""
    return hash64(*parts) / 2.0**64


def derive_seed(root_seed: int, label: str, *extra) -> int:
    """Derive a component seed from the root seed and a derivation label."""
    return hash64(root_seed, label, *extra)


def rng_for(root_seed: int, label: str, *extra) -> np.random.Generator:
    """Seeded numpy Generator for one component stream."""
    return np.random.default_rng(derive_seed(root_seed, label, *extra))
