"""Third-order tensor types, flattenings and structured reconstructions.

Index conventions are 0-based throughout. A factor matrix ``U`` of shape
``(n, k*k)`` stores the pair ``(p, q)`` in column ``pair_index(p, q, k) =
p + k*q``; :func:`tensorize` turns it into the ``(n, k, k)`` array with
``T[:, p, q] = U[:, p + k*q]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps


def pair_index(p, q, k):
    """Column of the pair ``(p, q)`` in an ``n x k^2`` factor matrix.

    Every routine that packs or unpacks ``k x k`` index pairs goes through
    this function (directly or through :func:`tensorize`).
    """
    return p + k * q


def unpair_index(c, k):
    """Inverse of :func:`pair_index`: returns ``(p, q)``."""
    return c % k, c // k


def tensorize(M, k):
    """Reshape ``(n, k*k)`` into ``(n, k, k)`` with ``T[:, p, q] = M[:, p + k*q]``."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != k * k:
        raise ValueError(f"expected a matrix with {k * k} columns, got shape {M.shape}")
    cols = np.array([[pair_index(p, q, k) for q in range(k)] for p in range(k)])
    return M[:, cols]


def matricize(T):
    """Inverse of :func:`tensorize`."""
    T = np.asarray(T, dtype=float)
    n, k, k2 = T.shape
    if k != k2:
        raise ValueError("trailing modes must be square")
    M = np.empty((n, k * k))
    for p in range(k):
        for q in range(k):
            M[:, pair_index(p, q, k)] = T[:, p, q]
    return M


@dataclass(frozen=True, eq=False)
class SparseTensor3:
    """Cubic ``n x n x n`` tensor in canonical coordinate form.

    Build instances through :meth:`from_entries` (or :meth:`from_dense`),
    which sums duplicate coordinates, drops zeros and sorts lexicographically.
    """

    n: int
    coords: np.ndarray  # (nnz, 3) int64
    values: np.ndarray  # (nnz,) float64

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if coords.shape[0] != values.shape[0]:
            raise ValueError("coords and values differ in length")
        if self.n < 1:
            raise ValueError("n must be positive")
        if coords.size and (coords.min() < 0 or coords.max() >= self.n):
            raise ValueError(f"index out of range for n={self.n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("tensor values must be finite")
        coords.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_entries(cls, n, coords, values):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        values = np.asarray(values, dtype=float).reshape(-1)
        if coords.shape[0] != values.shape[0]:
            raise ValueError("coords and values differ in length")
        if coords.size and (coords.min() < 0 or coords.max() >= n):
            raise ValueError(f"index out of range for n={n}")
        if coords.shape[0] == 0:
            return cls(n, coords, values)
        lin = (coords[:, 0] * n + coords[:, 1]) * n + coords[:, 2]
        uniq, inv = np.unique(lin, return_inverse=True)
        summed = np.bincount(inv, weights=values, minlength=uniq.size)
        keep = summed != 0
        uniq, summed = uniq[keep], summed[keep]
        out = np.stack([uniq // (n * n), (uniq // n) % n, uniq % n], axis=1)
        return cls(n, out, summed)

    @classmethod
    def from_dense(cls, T):
        T = np.asarray(T, dtype=float)
        if T.ndim != 3 or len(set(T.shape)) != 1:
            raise ValueError(f"expected a cubic 3-tensor, got shape {T.shape}")
        idx = np.argwhere(T != 0)
        return cls.from_entries(T.shape[0], idx, T[tuple(idx.T)])

    @classmethod
    def zeros(cls, n):
        return cls(n, np.zeros((0, 3), dtype=np.int64), np.zeros(0))

    @property
    def nnz(self):
        return int(self.values.shape[0])

    def to_dense(self):
        T = np.zeros((self.n,) * 3)
        T[tuple(self.coords.T)] = self.values
        return T

    def norm(self):
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True, eq=False)
class CycleFactors:
    """Factors ``U, V, W`` (each ``n x k^2``) of a cycle-rank-``k`` tensor."""

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    k: int

    def __post_init__(self):
        for name in ("U", "V", "W"):
            M = np.array(getattr(self, name), dtype=float)
            if M.ndim != 2 or M.shape[1] != self.k * self.k:
                raise ValueError(f"{name} must have k^2={self.k ** 2} columns")
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        if not self.U.shape[0] == self.V.shape[0] == self.W.shape[0]:
            raise ValueError("factor row counts differ")

    @property
    def n(self):
        return self.U.shape[0]

    @classmethod
    def zeros(cls, n, k):
        z = np.zeros((n, k * k))
        return cls(z, z, z, k)


@dataclass(frozen=True, eq=False)
class TuckerFactors:
    D: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        k = self.D.shape
        if len(k) != 3:
            raise ValueError("core must be a 3-tensor")
        for M, kk in zip((self.A, self.B, self.C), k):
            if M.ndim != 2 or M.shape[1] != kk:
                raise ValueError("factor column counts must match the core")


@dataclass(frozen=True, eq=False)
class TrainFactors:
    """Train cores ``A (1, n, k)``, ``B (k, n, k)``, ``C (k, n, 1)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A, B, C = self.A, self.B, self.C
        if A.ndim != 3 or B.ndim != 3 or C.ndim != 3:
            raise ValueError("train cores must be 3-tensors")
        if A.shape[0] != 1 or C.shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        if A.shape[2] != B.shape[0] or B.shape[2] != C.shape[0]:
            raise ValueError("train ranks do not chain")


def vec_tensor(T):
    """Row-major vectorization: the last index varies fastest."""
    return np.asarray(T, dtype=float).reshape(-1)


def outer3(a, b, c):
    a, b, c = (np.asarray(x, dtype=float).reshape(-1) for x in (a, b, c))
    if not a.shape == b.shape == c.shape:
        raise ValueError("outer3 needs vectors of equal length")
    return a[:, None, None] * b[None, :, None] * c[None, None, :]


def flatten(A: SparseTensor3, mode: int) -> sps.csr_matrix:
    """Sparse ``n x n^2`` flattening along ``mode`` (1, 2 or 3).

    Row ``r`` of mode 1 is ``vec(A[r, :, :])``; mode 2 fixes the second index
    (columns ordered ``(i, l)``) and mode 3 the third (columns ``(i, j)``).
    """
    n = A.n
    i, j, l = A.coords.T
    if mode == 1:
        rows, cols = i, j * n + l
    elif mode == 2:
        rows, cols = j, i * n + l
    elif mode == 3:
        rows, cols = l, i * n + j
    else:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    return sps.csr_matrix((A.values, (rows, cols)), shape=(n, n * n))


def flatten_dense(T, mode):
    """Dense analogue of :func:`flatten` for a (possibly non-cubic) 3-tensor."""
    T = np.asarray(T, dtype=float)
    if mode == 1:
        P = T
    elif mode == 2:
        P = T.transpose(1, 0, 2)
    elif mode == 3:
        P = T.transpose(2, 0, 1)
    else:
        raise ValueError(f"mode must be 1, 2 or 3, got {mode}")
    return P.reshape(P.shape[0], -1)


def unflatten_dense(M, mode, shape):
    """Inverse of :func:`flatten_dense` for a target tensor ``shape``."""
    n1, n2, n3 = shape
    M = np.asarray(M, dtype=float)
    if mode == 1:
        return M.reshape(n1, n2, n3)
    if mode == 2:
        return M.reshape(n2, n1, n3).transpose(1, 0, 2)
    if mode == 3:
        return M.reshape(n3, n1, n2).transpose(1, 2, 0)
    raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def cycle_from_matrices(U, V, W, k):
    """Cycle contraction of three ``(n_m, k^2)`` matrices (row counts may differ)."""
    Ub, Vb, Wb = tensorize(U, k), tensorize(V, k), tensorize(W, k)
    return np.einsum("iab,jbc,lca->ijl", Ub, Vb, Wb, optimize=True)


def cycle_reconstruct(F: CycleFactors):
    """``T[i,j,l] = sum_{a,b,c} U[i,a+kb] V[j,b+kc] W[l,c+ka]``."""
    return cycle_from_matrices(F.U, F.V, F.W, F.k)


def cp_reconstruct(A, B, C):
    A, B, C = (np.asarray(M, dtype=float) for M in (A, B, C))
    if not A.shape[1] == B.shape[1] == C.shape[1]:
        raise ValueError("CP factors need equal column counts")
    return np.einsum("ir,jr,lr->ijl", A, B, C, optimize=True)


def tucker_reconstruct(F: TuckerFactors):
    return np.einsum("pqr,ip,jq,lr->ijl", F.D, F.A, F.B, F.C, optimize=True)


def train_reconstruct(F: TrainFactors):
    if not F.A.shape[1] == F.B.shape[1] == F.C.shape[1]:
        raise ValueError("train cores disagree on n")
    return np.einsum("xia,ajb,bly->ijl", F.A, F.B, F.C, optimize=True)


def _cycle_gram_sq(F: CycleFactors):
    """``||cycle_reconstruct(F)||_F^2`` from the three ``k^2 x k^2`` Grams.

    Contraction order: first fold U's and V's Grams over the shared pair
    index ``b`` (``GU, GV -> T[a, A, c, C]``), then close the cycle with W's.
    """
    k = F.k
    Ub, Vb, Wb = tensorize(F.U, k), tensorize(F.V, k), tensorize(F.W, k)
    GU = np.einsum("iab,iAB->abAB", Ub, Ub)
    GV = np.einsum("ibc,iBC->bcBC", Vb, Vb)
    GW = np.einsum("ica,iCA->caCA", Wb, Wb)
    T = np.einsum("abAB,bcBC->aAcC", GU, GV)
    return float(np.einsum("aAcC,caCA->", T, GW))


def cycle_values_at(F: CycleFactors, coords):
    """Entries of ``cycle_reconstruct(F)`` at the given ``(m, 3)`` coordinates."""
    k = F.k
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    Ub, Vb, Wb = tensorize(F.U, k), tensorize(F.V, k), tensorize(F.W, k)
    return np.einsum(
        "eab,ebc,eca->e", Ub[coords[:, 0]], Vb[coords[:, 1]], Wb[coords[:, 2]],
        optimize=True,
    )


def residual_sq(F: CycleFactors, A: SparseTensor3, dense=False, counter=None):
    """``||cycle_reconstruct(F) - A||_F^2``.

    The default path never builds the ``n^3`` reconstruction: the cross term
    visits only the nonzeros of ``A`` and the squared norm of the
    reconstruction comes from Gram matrices. ``dense=True`` materializes
    everything, for cross-checking on small ``n``.
    """
    if F.n != A.n:
        raise ValueError(f"factor dimension {F.n} does not match tensor dimension {A.n}")
    if dense:
        return float(np.sum((cycle_reconstruct(F) - A.to_dense()) ** 2))
    cross = float(np.dot(cycle_values_at(F, A.coords), A.values))
    if counter is not None:
        counter.add("residual", A.nnz)
    val = _cycle_gram_sq(F) - 2.0 * cross + float(np.dot(A.values, A.values))
    return max(val, 0.0)


def cp_residual_sq(U, V, W, A: SparseTensor3, dense=False, counter=None):
    """CP analogue of :func:`residual_sq`."""
    U, V, W = (np.asarray(M, dtype=float) for M in (U, V, W))
    if U.shape[0] != A.n:
        raise ValueError(f"factor dimension {U.shape[0]} does not match tensor dimension {A.n}")
    if dense:
        return float(np.sum((cp_reconstruct(U, V, W) - A.to_dense()) ** 2))
    i, j, l = A.coords.T
    cross = float(np.dot(np.sum(U[i] * V[j] * W[l], axis=1), A.values))
    if counter is not None:
        counter.add("residual", A.nnz)
    gram = float(np.sum((U.T @ U) * (V.T @ V) * (W.T @ W)))
    return max(gram - 2.0 * cross + float(np.dot(A.values, A.values)), 0.0)


@dataclass
class AccumulationCounter:
    """Tally of multiply-accumulate visits to input-tensor entries, per stage."""

    counts: dict = field(default_factory=dict)

    def add(self, stage, visits):
        self.counts[stage] = self.counts.get(stage, 0) + int(visits)

    @property
    def total(self):
        return sum(self.counts.values())
