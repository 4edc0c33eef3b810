"""Deterministic noise streams for path simulation.

Every Monte Carlo routine draws Brownian increments from counter-based
Philox streams, one stream per path index. Path i therefore sees
bit-identical noise no matter how paths are batched, which worker runs
them, or how long the requested horizon is (a shorter run consumes a
prefix of the same stream). Distinct sub-jobs of one experiment derive
their own 64-bit job keys from the master seed and a short label.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_key", "make_generator", "NoiseSource"]


def derive_key(master_seed: int, label: str) -> int:
    """Derive a 64-bit job key from a master seed and a stream label.

    Stable across runs and platforms; independent labels give
    independent Philox key spaces.
    """
    if master_seed < 0:
        raise ValueError("master_seed must be nonnegative")
    payload = master_seed.to_bytes(16, "little") + label.encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little")


def _path_key(job_key: int, path_index: int) -> int:
    # Philox accepts a 128-bit key; the high word identifies the job,
    # the low word the path.
    return (int(job_key) << 64) | int(path_index)


def make_generator(job_key: int, path_index: int = 0) -> np.random.Generator:
    """Generator for one path's stream."""
    return np.random.Generator(np.random.Philox(key=_path_key(job_key, path_index)))


class NoiseSource:
    """Per-path standard-normal increments, consumed in step order.

    Successive calls to :meth:`normals` continue each path's stream, so
    drawing blocks of 500 + 500 steps yields exactly the same numbers as
    one block of 1000. Callers must consume steps strictly in order.
    """

    def __init__(self, job_key: int, n_paths: int, dim: int = 1):
        if n_paths <= 0 or dim <= 0:
            raise ValueError("n_paths and dim must be positive")
        self.job_key = int(job_key)
        self.n_paths = int(n_paths)
        self.dim = int(dim)
        self._gens = [make_generator(self.job_key, i) for i in range(self.n_paths)]
        self.steps_consumed = 0

    def normals(self, n_steps: int) -> np.ndarray:
        """Next block of increments, shape (n_paths, n_steps, dim)."""
        out = np.empty((self.n_paths, n_steps, self.dim))
        for i, g in enumerate(self._gens):
            out[i] = g.standard_normal((n_steps, self.dim))
        self.steps_consumed += n_steps
        return out
