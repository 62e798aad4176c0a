import numpy as np
import pytest

from cyclerank.solver import (
    SOLVER_NAME,
    CoreProblem,
    SolverOptions,
    als_block_solve,
    default_init_scales,
    objective_D,
    solve_core,
)
from cyclerank.tensor import cycle_from_matrices, flatten_dense
from cyclerank.zmatrices import build_Z


def random_core(g, t=(4, 5, 3), s=3, k=2, kind="cycle"):
    Ys = [g.standard_normal((ti, s)) for ti in t]
    B = g.standard_normal(t)
    return CoreProblem(*Ys, B, k, kind)


def blocks(g, core):
    return [g.standard_normal((Y.shape[1], core.width)) for Y in core.Ys]


def test_objective_matches_direct(rng):
    core = random_core(rng)
    Xs = blocks(rng, core)
    Gs = [Y @ X for Y, X in zip(core.Ys, Xs)]
    direct = np.sum((cycle_from_matrices(*Gs, 2) - core.B) ** 2)
    assert objective_D(*Xs, core) == pytest.approx(direct)


@pytest.mark.parametrize("block", [1, 2, 3])
def test_block_update_vs_kronecker_normal_equations(rng, block):
    core = random_core(rng, t=(5, 6, 4), s=3, k=2)
    Xs = blocks(rng, core)
    Gs = [Y @ X for Y, X in zip(core.Ys, Xs)]
    Z = build_Z(block, Gs, 2)
    Y = core.Ys[block - 1]
    Bm = flatten_dense(core.B, block)
    # vec(Y X Z) = (Z^T kron Y) vec(X) with column-major vec
    K = np.kron(Z.T, Y)
    x, *_ = np.linalg.lstsq(K, Bm.reshape(-1, order="F"), rcond=None)
    X_ref = x.reshape(Y.shape[1], -1, order="F")
    Xnew = als_block_solve(block, *Xs, core)
    trial = list(Xs)
    trial[block - 1] = Xnew
    ref = list(Xs)
    ref[block - 1] = X_ref
    assert objective_D(*trial, core) == pytest.approx(objective_D(*ref, core), rel=1e-9)
    if np.linalg.matrix_rank(K) == K.shape[1]:
        np.testing.assert_allclose(Xnew, X_ref, atol=1e-8)


def test_block_update_k1_grid(rng):
    core = random_core(rng, t=(3, 3, 3), s=1, k=1)
    Xs = blocks(rng, core)
    x1 = als_block_solve(1, *Xs, core)
    best = objective_D(x1, Xs[1], Xs[2], core)
    for v in np.linspace(-5, 5, 2001):
        assert objective_D(np.array([[v]]), Xs[1], Xs[2], core) >= best - 1e-12


def test_invalid_block(rng):
    core = random_core(rng)
    with pytest.raises(ValueError):
        als_block_solve(0, *blocks(rng, core), core)
    with pytest.raises(ValueError):
        objective_D(np.zeros((2, 2)), *blocks(rng, core)[1:], core)


def test_monotone_history(rng):
    core = random_core(rng)
    sol = solve_core(core, SolverOptions(starts=2, max_sweeps=50), trace=True)
    h = np.array(sol.history)
    assert np.all(np.diff(h) <= 1e-10 * np.maximum(h[:-1], 1.0))
    assert sol.objective == pytest.approx(objective_D(*sol.Xs, core), rel=1e-12)


def test_zero_core():
    g = np.random.default_rng(0)
    core = CoreProblem(*(g.standard_normal((3, 4)) for _ in range(3)), np.zeros((3, 3, 3)), 2)
    sol = solve_core(core, SolverOptions(starts=2))
    assert sol.objective == 0.0
    assert sol.converged


def test_planted_core_recovered():
    g = np.random.default_rng(1)
    k = 2
    Ys = [g.standard_normal((8, 6)) for _ in range(3)]
    Xs = [g.standard_normal((6, 4)) for _ in range(3)]
    B = cycle_from_matrices(*(Y @ X for Y, X in zip(Ys, Xs)), k)
    sol = solve_core(CoreProblem(*Ys, B, k), SolverOptions(starts=10))
    assert sol.objective <= 1e-8 * np.sum(B ** 2)


def test_cp_kind(rng):
    Ys = [rng.standard_normal((6, 4)) for _ in range(3)]
    Xs = [rng.standard_normal((4, 2)) for _ in range(3)]
    G = [Y @ X for Y, X in zip(Ys, Xs)]
    B = np.einsum("ir,jr,lr->ijl", *G)
    core = CoreProblem(*Ys, B, 2, "cp")
    assert core.width == 2
    sol = solve_core(core, SolverOptions(starts=5))
    assert sol.objective <= 1e-8 * np.sum(B ** 2)


def test_deterministic_and_threads(rng):
    core = random_core(rng)
    a = solve_core(core, SolverOptions(starts=4, seed=3))
    b = solve_core(core, SolverOptions(starts=4, seed=3, threads=3))
    np.testing.assert_array_equal(a.X1, b.X1)
    assert a.objective == b.objective and a.start_index == b.start_index


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(starts=0)
    with pytest.raises(ValueError):
        SolverOptions(max_sweeps=0)
    with pytest.raises(ValueError):
        SolverOptions(tol_rel=0)


def test_core_shape_validation(rng):
    with pytest.raises(ValueError):
        CoreProblem(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((3, 3, 4)), 1)
    with pytest.raises(ValueError):
        CoreProblem(*(np.zeros((2, 2)) for _ in range(3)), np.zeros((2, 2, 2)), 1, "tucker")


def test_init_scales_clamped(rng):
    core = random_core(rng)
    for s in default_init_scales(core):
        assert 1e-3 <= s <= 1e3


def test_solver_name():
    assert SOLVER_NAME == "heuristic-als"
