import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cyclerank.tensor import CycleFactors, SparseTensor3, cycle_reconstruct  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sparse(rng, n, nnz):
    lin = rng.choice(n ** 3, size=min(nnz, n ** 3), replace=False)
    coords = np.stack([lin // (n * n), (lin // n) % n, lin % n], axis=1)
    vals = rng.standard_normal(coords.shape[0])
    return SparseTensor3.from_entries(n, coords, vals)


def planted_cycle(seed, n=20, k=2, noise=0.0):
    """Planted cycle tensor; returns (A, planted factors, planted residual)."""
    g = np.random.default_rng(seed)
    F = CycleFactors(*(g.standard_normal((n, k * k)) for _ in range(3)), k)
    A0 = cycle_reconstruct(F)
    A = A0
    if noise > 0:
        N = g.standard_normal(A0.shape)
        A = A0 + N * (noise * np.linalg.norm(A0) / np.linalg.norm(N))
    return SparseTensor3.from_dense(A), F, float(np.sum((A - A0) ** 2))
