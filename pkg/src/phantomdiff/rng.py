"""Deterministic seed derivation.

One master seed governs every run.  Sub-seeds for individual components are
derived with a splitmix64 finalizer over the master seed and a list of
string/int labels, so adding a new consumer never perturbs the streams of
existing ones.  Label hashing uses blake2b, which is stable across
platforms and Python versions (unlike the builtin salted ``hash``).

Derivation, in full::

    state = splitmix64(master)
    for label in labels:
        state = splitmix64(state XOR blake2b64(label))

where ``blake2b64`` is the first 8 bytes of the blake2b digest of the
label's UTF-8 repr, and ``splitmix64`` is the standard finalizer
(golden-gamma increment, two xor-shift-multiply rounds).
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """One splitmix64 step: advance by the golden gamma and finalize."""
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _label_hash(label: object) -> int:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(master: int, *labels: object) -> int:
    """Derive a 64-bit sub-seed from a master seed and a label path."""
    state = splitmix64(master & _MASK)
    for label in labels:
        state = splitmix64(state ^ _label_hash(label))
    return state


def generator(master: int, *labels: object) -> np.random.Generator:
    """A PCG64 generator seeded by :func:`derive_seed`."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *labels)))


def torch_seed(master: int, *labels: object) -> int:
    """A non-negative 63-bit seed for ``torch.manual_seed``."""
    return derive_seed(master, *labels) & ((1 << 63) - 1)
