"""Shared numeric helpers: rounding convention and seed derivation."""

from __future__ import annotations

import hashlib

import numpy as np


def round_half_away(values):
    """Round to nearest integer, halves away from zero. Returns float array/scalar."""
    arr = np.asarray(values, dtype=np.float64)
    out = np.sign(arr) * np.floor(np.abs(arr) + 0.5)
    if out.ndim == 0:
        return float(out)
    return out


def _name_word(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name) & 0xFFFFFFFF
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(root: int, *names) -> np.random.SeedSequence:
    """Seed sequence for a named stream under ``root``.

    Names may be strings or ints; the same (root, names) always gives the
    same stream, independent of call order elsewhere.
    """
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, *(_name_word(n) for n in names)])


def derive_rng(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
