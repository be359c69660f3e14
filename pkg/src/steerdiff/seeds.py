"""Deterministic seed fan-out: one root seed, labeled child generators.

Every random draw in the package flows from ``derive_rng(root, *labels)``.
No module touches numpy's global random state.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root_seed: int, *labels) -> int:
    """A stable 64-bit child seed for (root, labels); labels may be str or int."""
    h = hashlib.sha256()
    h.update(str(int(root_seed)).encode())
    for lab in labels:
        h.update(b"/")
        h.update(str(lab).encode())
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(root_seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *labels))
