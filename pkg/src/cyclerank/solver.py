"""Small core solver: block-coordinate least squares with random multi-start.

The reduced objective is

    D(X1, X2, X3) = || cycle(Y1 X1, Y2 X2, Y3 X3) - B ||_F^2

(or its CP analogue). It is quadratic in each block, and with the other two
fixed the minimizer over block ``m`` is ``pinv(Ym) @ B_(m) @ pinv(Z)`` where
``Z`` is the mode-``m`` coefficient matrix of :mod:`cyclerank.zmatrices`.
Sweeping the three blocks never increases ``D``. This replaces an exact
polynomial-system solver, so there is no certificate of global optimality;
reports mark the result ``solver: heuristic-als``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .regression import pseudoinverse
from .sketch import make_rng
from .tensor import cp_reconstruct, cycle_from_matrices, flatten_dense
from .zmatrices import build_Z, khatri_rao_rows

log = logging.getLogger(__name__)

SOLVER_NAME = "heuristic-als"


@dataclass(frozen=True)
class SolverOptions:
    max_sweeps: int = 200
    tol_rel: float = 1e-10
    starts: int = 10
    init_scale: float | None = None  # None: balanced default from the data
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.starts < 1:
            raise ValueError("starts must be >= 1")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be > 0")

    def to_json(self):
        return {"max_sweeps": self.max_sweeps, "tol_rel": self.tol_rel, "starts": self.starts,
                "init_scale": self.init_scale, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class CoreProblem:
    """Reduced instance: ``Yi`` is ``ti x si`` and ``B`` is ``t1 x t2 x t3``.

    ``kind`` selects the cycle objective (columns ``si x k^2`` per block) or
    the CP objective (``si x k``).
    """

    Y1: np.ndarray
    Y2: np.ndarray
    Y3: np.ndarray
    B: np.ndarray
    k: int
    kind: str = "cycle"

    def __post_init__(self):
        Ys = [np.asarray(Y, dtype=float) for Y in (self.Y1, self.Y2, self.Y3)]
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 3 or tuple(Y.shape[0] for Y in Ys) != B.shape:
            raise ValueError("core tensor shape must match the Y row counts")
        if self.kind not in ("cycle", "cp"):
            raise ValueError(f"unknown core kind {self.kind!r}")
        object.__setattr__(self, "Y1", Ys[0])
        object.__setattr__(self, "Y2", Ys[1])
        object.__setattr__(self, "Y3", Ys[2])
        object.__setattr__(self, "B", B)

    @property
    def Ys(self):
        return (self.Y1, self.Y2, self.Y3)

    @property
    def width(self):
        """Columns per block variable: ``k^2`` (cycle) or ``k`` (CP)."""
        return self.k * self.k if self.kind == "cycle" else self.k


@dataclass(frozen=True, eq=False)
class CoreSolution:
    X1: np.ndarray
    X2: np.ndarray
    X3: np.ndarray
    objective: float
    sweeps_used: int
    start_index: int
    converged: bool = True
    nan_restarts: int = 0
    history: list = field(default_factory=list)

    @property
    def Xs(self):
        return (self.X1, self.X2, self.X3)


def _reconstruct(Gs, core):
    if core.kind == "cycle":
        return cycle_from_matrices(*Gs, core.k)
    return cp_reconstruct(*Gs)


def objective_D(X1, X2, X3, core: CoreProblem):
    Gs = []
    for Y, X in zip(core.Ys, (X1, X2, X3)):
        X = np.asarray(X, dtype=float)
        if X.shape != (Y.shape[1], core.width):
            raise ValueError(f"block shape {X.shape} != {(Y.shape[1], core.width)}")
        Gs.append(Y @ X)
    return float(np.sum((_reconstruct(Gs, core) - core.B) ** 2))


def _coefficients(block, Gs, core):
    if core.kind == "cycle":
        return build_Z(block, Gs, core.k)
    others = [Gs[m] for m in range(3) if m != block - 1]
    return khatri_rao_rows(*others)


class _Workspace:
    """Per-core precomputation: ``pinv(Ym) @ B_(m)`` for each mode."""

    def __init__(self, core):
        self.core = core
        self.flat = [flatten_dense(core.B, m) for m in (1, 2, 3)]
        self.proj = [pseudoinverse(Y) @ Bm for Y, Bm in zip(core.Ys, self.flat)]


def _block_update(block, Xs, ws):
    core = ws.core
    Gs = [Y @ X for Y, X in zip(core.Ys, Xs)]
    Z = _coefficients(block, Gs, core)
    Xnew = ws.proj[block - 1] @ pseudoinverse(Z)
    Gnew = core.Ys[block - 1] @ Xnew
    obj = float(np.sum((Gnew @ Z - ws.flat[block - 1]) ** 2))
    return Xnew, obj


def als_block_solve(block, X1, X2, X3, core: CoreProblem):
    """Exact minimizer of ``objective_D`` over block ``block`` (1, 2 or 3).

    The entry for the free block is ignored. Returns the minimal-norm
    solution, so a block whose ``Y`` is zero comes back as zeros.
    """
    if block not in (1, 2, 3):
        raise ValueError(f"block must be 1, 2 or 3, got {block}")
    Xs = [np.asarray(X, dtype=float) for X in (X1, X2, X3)]
    for Y, X in zip(core.Ys, Xs):
        if X.shape != (Y.shape[1], core.width):
            raise ValueError(f"block shape {X.shape} != {(Y.shape[1], core.width)}")
    Xnew, _ = _block_update(block, Xs, _Workspace(core))
    return Xnew


def default_init_scales(core: CoreProblem):
    """``||B||^(1/3) / (k * mean singular value of Yi)``, clamped to ``[1e-3, 1e3]``."""
    bn = np.linalg.norm(core.B) ** (1.0 / 3.0)
    scales = []
    for Y in core.Ys:
        s = np.linalg.svd(Y, compute_uv=False) if Y.size else np.zeros(1)
        mean = float(np.mean(s)) if s.size else 0.0
        raw = bn / (core.k * mean) if mean > 0 and bn > 0 else 1.0
        scales.append(float(np.clip(raw, 1e-3, 1e3)))
    return scales


def _run_start(core, ws, opts, scales, base_stream, start, trace):
    norm_b = float(np.sum(core.B ** 2))
    floor = 1e-28 * norm_b
    attempt = 0
    while True:
        rng = make_rng(opts.seed, tuple(base_stream) + (start, attempt))
        Xs = [rng.standard_normal((Y.shape[1], core.width)) * sc for Y, sc in zip(core.Ys, scales)]
        history = []
        prev = np.inf
        sweeps = 0
        converged = False
        bad = False
        for sweeps in range(1, opts.max_sweeps + 1):
            for block in (1, 2, 3):
                Xs[block - 1], obj = _block_update(block, Xs, ws)
                if trace:
                    history.append(obj)
            if not np.isfinite(obj):
                bad = True
                break
            if obj <= floor or (np.isfinite(prev) and prev - obj <= opts.tol_rel * max(prev, floor)):
                converged = True
                prev = obj
                break
            prev = obj
        if not bad:
            return Xs, prev, sweeps, converged, attempt, history
        attempt += 1
        log.warning("start %d produced a non-finite objective; reseeding (attempt %d)", start, attempt)
        if attempt > 5:
            zeros = [np.zeros((Y.shape[1], core.width)) for Y in core.Ys]
            return zeros, norm_b, sweeps, False, attempt, history


def solve_core(core: CoreProblem, opts: SolverOptions = SolverOptions(), stream=(), trace=False):
    """Best-of-``opts.starts`` block-coordinate descent on ``objective_D``.

    ``stream`` prefixes the per-start random streams, letting callers give
    each pipeline restart its own initializations. Ties between starts go to
    the lowest start index.
    """
    ws = _Workspace(core)
    if opts.init_scale is None:
        scales = default_init_scales(core)
    else:
        scales = [float(opts.init_scale)] * 3

    def run(s):
        return _run_start(core, ws, opts, scales, stream, s, trace)

    if opts.threads > 1 and opts.starts > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(run, range(opts.starts)))
    else:
        results = [run(s) for s in range(opts.starts)]

    best = None
    for s, (Xs, obj, sweeps, conv, attempts, hist) in enumerate(results):
        if best is None or obj < best[1]:
            best = (Xs, obj, sweeps, conv, attempts, hist, s)
    Xs, _, sweeps, conv, attempts, hist, s = best
    # objective re-evaluated directly so the reported value is exact for the returned blocks
    obj = objective_D(*Xs, core)
    return CoreSolution(Xs[0], Xs[1], Xs[2], obj, sweeps, s, conv,
                        sum(r[4] for r in results), hist)
