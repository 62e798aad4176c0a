"""Rotate-and-sketch pipelines for cycle-rank and CP-rank approximation.

One run of :func:`approx_cycle_rank`:

1. draw composed sketches ``S1, S2, S3`` (``n^2 -> s``) and CountSketches
   ``T1, T2, T3`` (``n -> t``);
2. form ``Ai Si`` from the sparse flattenings, then ``Yi = Ti Ai Si`` and
   ``B = A(T1, T2, T3)``;
3. minimize the reduced objective over ``Xi`` with :func:`solve_core`;
4. lift back: ``U = A1 S1 X1`` and likewise for ``V``, ``W``.

``restarts`` independent runs (split seed streams) are made and the one with
the lowest true residual is kept.

Random streams per restart ``r``: ``(r, 0..2)`` for ``S1..S3``, ``(r, 3..5)``
for ``T1..T3`` and ``(r, 6)`` as the solver prefix.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .regression import pseudoinverse
from .sketch import (
    ComposedOp,
    composed_new,
    contract_all_modes,
    countsketch_new,
    gaussian_new,
    identity_countsketch,
    sketch_columns,
)
from .solver import SOLVER_NAME, CoreProblem, SolverOptions, solve_core
from .tensor import (
    AccumulationCounter,
    CycleFactors,
    SparseTensor3,
    cp_residual_sq,
    flatten,
    residual_sq,
)
from .zmatrices import build_Z

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Sizes: ``s = ceil(c_s k^2/eps)`` (CP: ``ceil(c_s k/eps)``), ``t = ceil(c_t k^4/eps^2)``.

    ``c_m`` sets the CountSketch stage inside each composed ``Si``:
    ``ceil(c_m (r^2 + r/eps))`` buckets for ``r`` = block width (``k^2`` or ``k``),
    capped at ``n^2`` where the stage becomes the identity. ``t >= n`` also
    turns the ``Ti`` into identities.
    """

    k: int
    eps: float
    c_s: float = 10.0
    c_t: float = 10.0
    c_m: float = 10.0
    restarts: int = 5
    seed: int = 0
    solver: SolverOptions = SolverOptions()
    sketch: str = "composed"  # or "gaussian"
    threads: int = 1
    dense_check: bool = False
    identity_sketches: bool = False  # test hook: every Si, Ti is the identity

    def __post_init__(self):
        if not isinstance(self.k, (int, np.integer)) or self.k < 1:
            raise ConfigError(f"k must be an integer >= 1 (got {self.k})")
        if not 0 < self.eps < 1:
            raise ConfigError(f"eps must lie in the open interval (0, 1) (got {self.eps})")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if min(self.c_s, self.c_t, self.c_m) <= 0:
            raise ConfigError("size constants must be positive")
        if self.sketch not in ("composed", "gaussian"):
            raise ConfigError(f"unknown sketch kind {self.sketch!r}")
        s, t = self.s_cycle, self.t_raw
        if s < self.k * self.k or t < s:
            raise ConfigError(f"sizes violate k^2 <= s <= t (s={s}, t={t})")

    @property
    def s_cycle(self):
        return math.ceil(self.c_s * self.k ** 2 / self.eps)

    @property
    def s_cp(self):
        return math.ceil(self.c_s * self.k / self.eps)

    @property
    def t_raw(self):
        return math.ceil(self.c_t * self.k ** 4 / self.eps ** 2)

    def inner(self, width):
        return math.ceil(self.c_m * (width ** 2 + width / self.eps))

    def to_json(self):
        return {"k": self.k, "eps": self.eps, "c_s": self.c_s, "c_t": self.c_t, "c_m": self.c_m,
                "restarts": self.restarts, "seed": self.seed, "sketch": self.sketch,
                "dense_check": self.dense_check, "identity_sketches": self.identity_sketches,
                "solver": {**self.solver.to_json(), "seed": self.seed}}


@dataclass
class ApproxReport:
    residual_sq: float
    norm_sq: float
    kind: str
    config: dict
    best_restart: int
    restart_residuals: list
    sizes: dict
    core: dict
    accumulations: dict
    timings: dict = field(default_factory=dict)
    opt_lower_bound: float | None = None
    solver: str = SOLVER_NAME
    sketches: list = field(default_factory=list)

    @property
    def relative_residual(self):
        return self.residual_sq / self.norm_sq if self.norm_sq > 0 else 0.0

    @property
    def solver_converged(self):
        return bool(self.core.get("converged", True))

    def to_json(self, include_timings=True):
        out = {
            "kind": self.kind,
            "residual_sq": self.residual_sq,
            "norm_sq": self.norm_sq,
            "relative_residual": self.relative_residual,
            "opt_lower_bound": self.opt_lower_bound,
            "solver": self.solver,
            "solver_converged": self.solver_converged,
            "best_restart": self.best_restart,
            "restart_residuals": self.restart_residuals,
            "sizes": self.sizes,
            "core": self.core,
            "accumulations": self.accumulations,
            "sketches": self.sketches,
            "config": self.config,
        }
        if include_timings:
            out["timings"] = self.timings
        return out


# -- building blocks -------------------------------------------------------------


def input_sparsity_reduce(A: SparseTensor3, V1, V2, V3, t, seed=0, stream=(), counter=None,
                          sketches=None):
    """Compress ``A`` and three ``n x bi`` matrices with CountSketches of height ``t``.

    Returns ``(V1hat, V2hat, V3hat, C, (T1, T2, T3))``. ``t`` may be a single
    height or a triple; heights ``>= n`` use the identity. ``sketches``
    overrides the drawn operators.
    """
    n = A.n
    Vs = [np.asarray(V, dtype=float) for V in (V1, V2, V3)]
    for V in Vs:
        if V.shape[0] != n:
            raise ValueError(f"expected {n} rows, got {V.shape[0]}")
    ts = (t, t, t) if np.isscalar(t) else tuple(t)
    if sketches is None:
        sketches = tuple(
            identity_countsketch(n) if ti >= n else countsketch_new(ti, n, seed, tuple(stream) + (m,))
            for m, ti in enumerate(ts)
        )
    Vhat = [T.apply(V) for T, V in zip(sketches, Vs)]
    C = contract_all_modes(A, *sketches, counter=counter)
    return Vhat[0], Vhat[1], Vhat[2], C, sketches


def _column_sketch(cfg, width, N, stream):
    s = cfg.s_cycle if width == cfg.k ** 2 else cfg.s_cp
    if cfg.identity_sketches:
        return identity_countsketch(N)
    if cfg.sketch == "gaussian":
        return gaussian_new(s, N, cfg.seed, stream)
    inner = cfg.inner(width)
    if inner >= N:
        return ComposedOp(gaussian_new(s, N, cfg.seed, tuple(stream) + (1,)),
                          identity_countsketch(N))
    return composed_new(s, inner, N, cfg.seed, stream)


@dataclass
class _RunResult:
    factors: tuple
    residual: float
    core: dict
    counter: AccumulationCounter
    timings: dict
    sizes: dict
    sketches: list


def _run_once(A: SparseTensor3, cfg: PipelineConfig, restart: int, kind: str):
    n, k = A.n, cfg.k
    width = k * k if kind == "cycle" else k
    counter = AccumulationCounter()
    timings = {}
    clock = time.perf_counter()

    S = [_column_sketch(cfg, width, n * n, (restart, m)) for m in range(3)]
    t = n if cfg.identity_sketches else min(cfg.t_raw, n)
    T = [identity_countsketch(n) if t >= n else countsketch_new(t, n, cfg.seed, (restart, 3 + m))
         for m in range(3)]
    timings["draw"] = time.perf_counter() - clock

    clock = time.perf_counter()
    AS = [sketch_columns(flatten(A, m + 1), S[m], counter, stage="sketch_columns")
          for m in range(3)]
    timings["sketch_columns"] = time.perf_counter() - clock

    clock = time.perf_counter()
    Y1, Y2, Y3, B, _ = input_sparsity_reduce(A, *AS, t, counter=counter, sketches=tuple(T))
    timings["reduce"] = time.perf_counter() - clock

    clock = time.perf_counter()
    core = CoreProblem(Y1, Y2, Y3, B, k, kind)
    opts = replace(cfg.solver, seed=cfg.seed)
    sol = solve_core(core, opts, stream=(restart, 6))
    timings["solve_core"] = time.perf_counter() - clock

    clock = time.perf_counter()
    factors = tuple(M @ X for M, X in zip(AS, sol.Xs))
    if kind == "cycle":
        res = residual_sq(CycleFactors(*factors, k), A, dense=cfg.dense_check, counter=counter)
    else:
        res = cp_residual_sq(*factors, A, dense=cfg.dense_check, counter=counter)
    timings["residual"] = time.perf_counter() - clock

    core_info = {"objective": sol.objective, "sweeps_used": sol.sweeps_used,
                 "start_index": sol.start_index, "converged": sol.converged,
                 "nan_restarts": sol.nan_restarts,
                 "core_norm_sq": float(np.sum(B ** 2))}
    sizes = {"n": n, "s": [op.m for op in S], "t": [op.m for op in T],
             "inner": [getattr(getattr(op, "countsketch", None), "m", None) for op in S]}
    descs = [op.to_json() for op in S] + [op.to_json() for op in T]
    return _RunResult(factors, res, core_info, counter, timings, sizes, descs)


def _run_restarts(A, cfg, kind):
    def run(r):
        return _run_once(A, cfg, r, kind)

    if cfg.threads > 1 and cfg.restarts > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            runs = list(pool.map(run, range(cfg.restarts)))
    else:
        runs = [run(r) for r in range(cfg.restarts)]
    best = min(range(len(runs)), key=lambda r: (runs[r].residual, r))
    chosen = runs[best]
    total = AccumulationCounter()
    for run_ in runs:
        for stage, c in run_.counter.counts.items():
            total.add(stage, c)
    timings = {stage: sum(r.timings[stage] for r in runs) for stage in chosen.timings}
    report = ApproxReport(
        residual_sq=chosen.residual,
        norm_sq=float(np.dot(A.values, A.values)),
        kind=kind,
        config=cfg.to_json(),
        best_restart=best,
        restart_residuals=[r.residual for r in runs],
        sizes=chosen.sizes,
        core=chosen.core,
        accumulations={"per_restart": chosen.counter.counts, "total": total.total,
                       "nnz": A.nnz},
        timings=timings,
        sketches=chosen.sketches,
    )
    if not chosen.core["converged"]:
        log.warning("core solver hit max_sweeps before converging")
    return chosen.factors, report


def approx_cycle_rank(A: SparseTensor3, cfg: PipelineConfig):
    """Cycle-rank-``k`` approximation of ``A``; returns ``(CycleFactors, ApproxReport)``."""
    factors, report = _run_restarts(A, cfg, "cycle")
    return CycleFactors(*factors, cfg.k), report


def approx_cp_rank(A: SparseTensor3, cfg: PipelineConfig):
    """CP-rank-``k`` approximation; returns ``((U, V, W), ApproxReport)`` with ``n x k`` factors."""
    factors, report = _run_restarts(A, cfg, "cp")
    return factors, report


# -- the constructive argument, as a refinement step --------------------------------


def rotate_and_sketch(A: SparseTensor3, F: CycleFactors, sketches=None):
    """Three sketched regressions ``U <- A1 S1 pinv(Z1 S1)``, then ``V``, then ``W``.

    Starts from ``F`` (typically a good guess for ``V`` and ``W``) and
    returns the updated factors with the true residual after each step.
    ``sketches=None`` uses exact regressions, in which case the residual
    sequence is non-increasing. Builds dense ``k^2 x n^2`` coefficient
    matrices, so it is meant for small ``n``.
    """
    k = F.k
    facs = [np.array(F.U), np.array(F.V), np.array(F.W)]
    residuals = [residual_sq(F, A)]
    for m in (1, 2, 3):
        Z = build_Z(m, facs, k)
        Aflat = flatten(A, m)
        if sketches is None:
            AS = np.asarray(Aflat.toarray())
            ZS = Z
        else:
            Sm = sketches[m - 1]
            AS = sketch_columns(Aflat, Sm)
            ZS = sketch_columns(Z, Sm)
        facs[m - 1] = AS @ pseudoinverse(ZS)
        residuals.append(residual_sq(CycleFactors(*facs, k), A))
    return CycleFactors(*facs, k), residuals
