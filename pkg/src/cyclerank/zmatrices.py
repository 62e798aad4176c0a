"""Coefficient matrices that turn one cycle factor into a linear regression.

For cycle factors ``(U, V, W)`` and the flattenings of :func:`flatten_dense`:

* ``U @ build_Z1(V, W)`` is the mode-1 flattening of the reconstruction,
* ``V @ build_Z2(U, W)`` the mode-2 flattening,
* ``W @ build_Z3(U, V)`` the mode-3 flattening.

The row belonging to free-factor column ``pair_index(p, q, k)`` sits at that
same position, so the products above need no permutation. Inputs may have
different row counts (the core solver builds these at reduced sizes).
"""
from __future__ import annotations

import numpy as np

from .tensor import pair_index, tensorize


def _assemble(blocks, k):
    # blocks[p, q] is the row for free-factor column pair_index(p, q, k)
    _, _, r1, r2 = blocks.shape
    Z = np.empty((k * k, r1 * r2))
    for p in range(k):
        for q in range(k):
            Z[pair_index(p, q, k)] = blocks[p, q].reshape(-1)
    return Z


def _check(M, k, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[1] != k * k:
        raise ValueError(f"{name} must have k^2={k * k} columns, got shape {M.shape}")
    return M


def build_Z1(V, W, k):
    """Row ``(a, b)``: ``vec(sum_c V[:, b + k c] (x) W[:, c + k a])``."""
    Vb = tensorize(_check(V, k, "V"), k)
    Wb = tensorize(_check(W, k, "W"), k)
    return _assemble(np.einsum("jbc,lca->abjl", Vb, Wb), k)


def build_Z2(U, W, k):
    """Row ``(b, c)``: ``vec(sum_a U[:, a + k b] (x) W[:, c + k a])``."""
    Ub = tensorize(_check(U, k, "U"), k)
    Wb = tensorize(_check(W, k, "W"), k)
    return _assemble(np.einsum("iab,lca->bcil", Ub, Wb), k)


def build_Z3(U, V, k):
    """Row ``(c, a)``: ``vec(sum_b U[:, a + k b] (x) V[:, b + k c])``."""
    Ub = tensorize(_check(U, k, "U"), k)
    Vb = tensorize(_check(V, k, "V"), k)
    return _assemble(np.einsum("iab,jbc->caij", Ub, Vb), k)


def build_Z(mode, factors, k):
    """Coefficient matrix for ``mode`` given all three factors (the free one ignored)."""
    U, V, W = factors
    if mode == 1:
        return build_Z1(V, W, k)
    if mode == 2:
        return build_Z2(U, W, k)
    if mode == 3:
        return build_Z3(U, V, k)
    raise ValueError(f"mode must be 1, 2 or 3, got {mode}")


def khatri_rao_rows(B, C):
    """CP analogue: ``Z[r, (j, l)] = B[j, r] * C[l, r]`` so ``A @ Z`` flattens ``A (x) B (x) C``."""
    B = np.asarray(B, dtype=float)
    C = np.asarray(C, dtype=float)
    if B.shape[1] != C.shape[1]:
        raise ValueError("CP factors need equal column counts")
    return np.einsum("jr,lr->rjl", B, C).reshape(B.shape[1], -1)
