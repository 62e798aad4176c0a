"""Exact and sketched multiple-response least squares."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class LsSolution:
    X: np.ndarray
    residual_sq: float
    rank_used: int


def _default_tol(M):
    return np.finfo(float).eps * max(M.shape)


def pseudoinverse(M, tol=None, return_rank=False):
    """Moore-Penrose pseudoinverse from the thin SVD.

    Singular values at or below ``tol * sigma_max`` are treated as zero; the
    default ``tol`` is ``eps_machine * max(rows, cols)``.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError("pseudoinverse expects a matrix")
    if M.size == 0:
        P = np.zeros(M.shape[::-1])
        return (P, 0) if return_rank else P
    if tol is None:
        tol = _default_tol(M)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    cutoff = tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    P = (Vt[keep].T / s[keep]) @ U[:, keep].T
    return (P, rank) if return_rank else P


def solve_ls(A, B, tol=None) -> LsSolution:
    """Minimal-norm minimizer of ``||A X - B||_F``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"row counts differ: A has {A.shape[0]}, B has {B.shape[0]}")
    vec = B.ndim == 1
    B2 = B.reshape(B.shape[0], -1)
    P, rank = pseudoinverse(A, tol, return_rank=True)
    X = P @ B2
    res = float(np.sum((A @ X - B2) ** 2))
    return LsSolution(X.reshape(-1) if vec else X, res, rank)


def solve_sketched_ls(A, B, S, tol=None) -> LsSolution:
    """Solve ``min_X ||S B - S A X||_F`` and report the unsketched residual."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if S.n != A.shape[0] or A.shape[0] != B.shape[0]:
        raise ValueError(f"sketch source dimension {S.n} does not match {A.shape[0]} rows")
    SA = S.apply(A)
    SB = S.apply(B)
    sol = solve_ls(SA, SB, tol)
    if sol.rank_used < A.shape[1]:
        warnings.warn(
            f"sketched system has rank {sol.rank_used} < {A.shape[1]}",
            RankDeficiencyWarning, stacklevel=2,
        )
    X = sol.X
    B2 = B.reshape(B.shape[0], -1)
    res = float(np.sum((A @ X.reshape(A.shape[1], -1) - B2) ** 2))
    return LsSolution(X, res, sol.rank_used)
