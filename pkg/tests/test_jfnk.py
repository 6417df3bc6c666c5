import math

import numpy as np
import pytest

from fnonewton import _accel
from fnonewton.datagen import GeneratorConfig, make_sample
from fnonewton.discretization import Grid, ProblemSpec, bubble, dense_jacobian, elliptic_apply, residual
from fnonewton.jfnk import (
    KrylovConfig, LineSearchConfig, NewtonConfig, _FusedEllipticSolver, _MatrixFreeSolver,
    armijo_search, jvp, krylov_solve, newton_krylov, newton_solve,
)
from fnonewton.gridsearch import naive_guess


def tridiag(n, lo, mid, hi):
    return np.diag(np.full(n, mid)) + np.diag(np.full(n - 1, lo), -1) + np.diag(np.full(n - 1, hi), 1)


def problem(n=40, p=4, alpha0=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return make_sample(Grid(1, n), p, alpha0, GeneratorConfig(), rng)


def test_config_validation():
    with pytest.raises(ValueError):
        NewtonConfig(eta=1.0)
    with pytest.raises(ValueError):
        NewtonConfig(max_iter=0)
    with pytest.raises(ValueError):
        NewtonConfig(f_tol=0)
    with pytest.raises(ValueError):
        LineSearchConfig(rho=1.0)
    with pytest.raises(ValueError):
        NewtonConfig(forcing="magic")
    assert NewtonConfig.for_dim(2).f_tol == 1e-5
    assert NewtonConfig.for_dim(1).f_tol == 1e-6
    assert NewtonConfig(krylov={"restart": 10}).krylov.restart == 10


def test_jvp_zero_direction():
    out = jvp(lambda u: u ** 3, np.ones(4), np.zeros(4))
    assert np.array_equal(out, np.zeros(4))


def test_jvp_square():
    out = jvp(lambda u: u * u, np.ones(8), np.ones(8))
    assert np.allclose(out, 2.0, atol=1e-6)


def test_jvp_affine_exact():
    a = tridiag(12, -1.0, 3.0, -1.0)
    b = np.arange(12.0)
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=12), rng.normal(size=12)
    assert np.allclose(jvp(lambda w: a @ w - b, u, v), a @ v, rtol=1e-6, atol=1e-6)


def test_jvp_nonfinite_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        jvp(lambda u: np.log(u), np.zeros(3) + 1e-300, -np.ones(3))


@pytest.mark.parametrize("p", [0, 2, 4])
def test_jvp_matches_dense_jacobian(p):
    s = problem(24, p, 2.0, seed=p)
    rng = np.random.default_rng(10 + p)

    def fun(w):
        return residual(w, s.spec)
    for _ in range(3):
        u = s.u + 0.1 * rng.normal(size=24) * bubble(s.spec.grid)
        jac = dense_jacobian(fun, u)
        for j in range(24):
            e = np.zeros(24)
            e[j] = 1.0
            col = jvp(fun, u, e)
            assert np.linalg.norm(col - jac[:, j]) <= 1e-5 * max(np.linalg.norm(jac[:, j]), 1e-12)


def test_krylov_identity_and_scaled():
    rhs = np.arange(1.0, 9.0)
    res = krylov_solve(lambda v: v, rhs, 1e-8)
    assert np.allclose(res.x, rhs) and res.matvecs <= 2
    res = krylov_solve(lambda v: 2 * v, rhs, 1e-8)
    assert np.allclose(res.x, rhs / 2) and res.converged


def test_krylov_spd_matches_direct():
    a = tridiag(16, -1.0, 2.5, -1.0)
    rhs = np.random.default_rng(0).normal(size=16)
    ref = np.linalg.solve(a, rhs)
    for tol in (1e-3, 1e-8):
        res = krylov_solve(lambda v: a @ v, rhs, tol)
        assert res.converged
        assert np.linalg.norm(rhs - a @ res.x) <= tol * np.linalg.norm(rhs)
        assert np.linalg.norm(res.x - ref) <= tol * np.linalg.cond(a) * np.linalg.norm(ref)


def test_krylov_restart_and_recycling():
    rng = np.random.default_rng(1)
    a = np.diag(np.linspace(1, 50, 60)) + 0.1 * rng.normal(size=(60, 60))
    rhs = rng.normal(size=60)
    outer = []
    res = krylov_solve(lambda v: a @ v, rhs, 1e-8, restart=5, max_inner=2000, recycle=2, outer=outer)
    assert res.converged
    assert np.linalg.norm(rhs - a @ res.x) <= 1e-8 * np.linalg.norm(rhs) * 1.0001
    assert 0 < len(outer) <= 2


def test_krylov_best_iterate_on_budget():
    a = np.diag(np.linspace(1, 1000, 100))
    rhs = np.ones(100)
    res = krylov_solve(lambda v: a @ v, rhs, 1e-12, restart=5, max_inner=10, recycle=0)
    assert not res.converged
    assert res.residual < 1.0
    assert res.matvecs <= 11


def test_krylov_zero_rhs():
    res = krylov_solve(lambda v: v, np.zeros(5), 1e-3)
    assert np.array_equal(res.x, np.zeros(5)) and res.converged


def test_armijo_full_step():
    ls = armijo_search(lambda u: u ** 3 - 1, np.array([2.0]), np.array([-7.0 / 12.0]), np.array([7.0]))
    assert ls.step == 1.0 and ls.improved


def test_armijo_backtracks_on_arctan():
    fun = np.arctan
    u = np.array([10.0])
    f0 = fun(u)
    delta = -f0 * (1 + u ** 2)  # exact Newton step
    # hand enumeration of 1, 1/2, 1/4, ...
    lam, expected = 1.0, None
    while lam >= 1e-4:
        if abs(math.atan(10.0 + lam * delta[0])) <= (1 - 1e-4 * lam) * abs(f0[0]):
            expected = lam
            break
        lam /= 2
    assert expected == 0.125
    ls = armijo_search(fun, u, delta, f0)
    assert ls.step == expected and ls.improved
    assert ls.norm_new < abs(f0[0])


def test_armijo_no_descent_returns_lambda_min():
    ls = armijo_search(lambda u: u, np.array([1.0]), np.array([1.0]), np.array([1.0]))
    assert not ls.improved and ls.step == 1e-4


def test_armijo_affine_exact_step():
    a = tridiag(10, -1.0, 4.0, -1.0)
    b = np.ones(10)
    u = np.zeros(10)
    ls = armijo_search(lambda w: a @ w - b, u, np.linalg.solve(a, b), -b)
    assert ls.step == 1.0 and ls.norm_new < 1e-12


def test_newton_krylov_scalar_system():
    rep = newton_krylov(lambda u: u ** 3 - 8.0, np.full(3, 1.0), NewtonConfig(f_tol=1e-12, eta=1e-6))
    assert rep.converged
    assert np.allclose(rep.solution, 2.0)
    assert rep.residual_history[-1] <= 1e-12
    assert len(rep.residual_history) == rep.iterations + 1


def test_exact_start_zero_iterations():
    s = problem(100)
    rep = newton_solve(s.spec, s.u)
    assert rep.converged and rep.iterations == 0


def test_wrong_guess_shape():
    s = problem(20)
    with pytest.raises(ValueError):
        newton_solve(s.spec, np.zeros(21))


@pytest.mark.parametrize("c", [0.5, 0.75, 1.0, 1.25, 1.5])
def test_affine_converges_fast(c):
    s = problem(32, p=0, seed=3)
    rep = newton_solve(s.spec, naive_guess(s.spec.grid, c))
    assert rep.converged and rep.iterations <= 3
    assert np.allclose(rep.solution, s.u, atol=1e-5)


def test_cap_reported_as_failure():
    s = problem(100, seed=5)
    rep = newton_solve(s.spec, naive_guess(s.spec.grid, 1.0), NewtonConfig(max_iter=2))
    assert not rep.converged and rep.iterations == 2
    assert rep.residual_history[-1] > 1e-6


def test_nonfinite_state_aborts():
    s = problem(30, p=2)
    rep = newton_solve(s.spec, np.full(30, np.nan))
    assert not rep.converged
    assert "non-finite" in rep.message


def test_superlinear_near_solution():
    s = problem(60, seed=2)
    rng = np.random.default_rng(0)
    u0 = s.u + 1e-3 * rng.normal(size=60) * bubble(s.spec.grid)
    rep = newton_solve(s.spec, u0, NewtonConfig(f_tol=1e-10, eta=1e-6))
    h = [r for r in rep.residual_history if r > 1e-12]
    assert rep.converged and len(h) >= 3
    for a, b in zip(h[-3:-1], h[-2:]):
        assert b <= 1.0 * a ** 1.5 or b <= 1e-9


def test_accepted_steps_do_not_increase_the_two_norm():
    s = problem(100, seed=1)
    seen = []

    def fun(v):
        return residual(v, s.spec)

    class Recorder(_MatrixFreeSolver):
        def __call__(self, u, f, eta):
            seen.append(np.linalg.norm(f))
            return super().__call__(u, f, eta)
    rep = newton_krylov(fun, naive_guess(s.spec.grid), NewtonConfig(max_iter=40), Recorder(fun, KrylovConfig()))
    assert len(seen) > 5
    # steps that found sufficient decrease are monotone in the line-search merit
    drops = np.diff(seen)
    assert np.sum(drops <= 0) >= len(drops) // 2
    assert rep.iterations <= 40


def test_deterministic():
    s = problem(100, seed=7)
    a = newton_solve(s.spec, naive_guess(s.spec.grid))
    b = newton_solve(s.spec, naive_guess(s.spec.grid))
    assert a.iterations == b.iterations
    assert np.array_equal(a.solution, b.solution)
    assert a.residual_history == b.residual_history


@pytest.mark.skipif(not _accel.USE_NUMBA, reason="numba not installed")
def test_fused_solver_matches_python_solver():
    s = problem(50, seed=4)
    u = naive_guess(s.spec.grid)
    f = residual(u, s.spec)
    kc = KrylovConfig()
    a = _MatrixFreeSolver(lambda w: residual(w, s.spec), kc)(u, f, 1e-6)
    b = _FusedEllipticSolver(s.spec, kc)(u, f, 1e-6)
    assert a.converged and b.converged
    assert np.allclose(a.x, b.x, rtol=1e-5, atol=1e-8 * np.abs(a.x).max())


def test_affine_2d_from_naive():
    g = Grid(2, 16)
    s = make_sample(g, 0, 1.0, GeneratorConfig(), np.random.default_rng(0))
    rep = newton_solve(s.spec, naive_guess(g))
    assert rep.converged and rep.iterations <= 3
    assert np.allclose(rep.solution, s.u, atol=1e-5)


def test_2d_solve_near_solution():
    g = Grid(2, 16)
    rng = np.random.default_rng(0)
    s = make_sample(g, 2, 1.0, GeneratorConfig(), rng)
    u0 = s.u * (1 + 0.01 * rng.normal(size=g.shape))
    rep = newton_solve(s.spec, u0)
    assert rep.converged
    assert rep.residual_history[-1] <= 1e-5
    assert np.allclose(rep.solution, s.u, atol=1e-4)
    # the manufactured source is consistent with the recovered solution
    assert np.abs(elliptic_apply(rep.solution, s.spec) - s.spec.phi)[g.interior()].max() <= 1e-5
