"""Deterministic random-stream derivation and BLAS thread pinning.

All randomness in the package flows from a single root seed; independent
streams are derived by hashing a purpose label so that adding or reordering
consumers never perturbs unrelated streams.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np
from threadpoolctl import threadpool_limits


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Return a generator for `label`, independent of other labels' streams."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    salt = int.from_bytes(digest[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFF, salt]))


@contextmanager
def single_threaded_blas():
    """Pin BLAS to one thread: multi-threaded reductions reorder float sums,
    so results would vary with the host's core count; at this model scale one
    thread is also faster than the sync overhead."""
    with threadpool_limits(limits=1):
        yield
