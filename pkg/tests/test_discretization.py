import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fnonewton import kernels
from fnonewton.discretization import (
    Field, Grid, GridMismatchError, ProblemSpec, batch_residual, bubble, dense_jacobian,
    elliptic_apply, first_derivative, first_derivative_adjoint, load_field, residual,
    residual_1d, residual_2d, save_field,
)


def spec1(n=5, p=0, alpha0=1.0, k=None, phi=None):
    g = Grid(1, n)
    return ProblemSpec(g, p, np.ones(n) if k is None else k, np.zeros(n) if phi is None else phi, alpha0)


def iso_k2(n):
    k = np.zeros((4, n, n))
    k[0] = k[3] = 1.0
    return k


def test_grid_basics():
    g = Grid(1, 5)
    assert g.h == 0.25
    assert g.shape == (5,)
    assert Grid(2, 4).size == 16
    with pytest.raises(ValueError):
        Grid(1, 2)
    with pytest.raises(ValueError):
        Grid(3, 8)


def test_boundary_mask_2d():
    m = Grid(2, 4).boundary_mask()
    assert m.sum() == 12
    assert not m[1:-1, 1:-1].any()


def test_spec_rejects_odd_p_and_bad_k():
    g = Grid(1, 5)
    with pytest.raises(ValueError):
        ProblemSpec(g, 3, np.ones(5))
    with pytest.raises(ValueError):
        ProblemSpec(g, 2, -np.ones(5))
    k = iso_k2(5)
    k[1, 2, 2] = 0.1
    with pytest.raises(ValueError, match="symmetric"):
        ProblemSpec(Grid(2, 5), 2, k)
    k = iso_k2(5)
    k[1] = k[2] = 2.0
    with pytest.raises(ValueError, match="positive definite"):
        ProblemSpec(Grid(2, 5), 2, k)


def test_zero_state_zero_source():
    assert np.all(residual_1d(np.zeros(5), spec1(p=2)) == 0)
    s = ProblemSpec(Grid(2, 6), 2, iso_k2(6), np.zeros((6, 6)))
    assert np.all(residual_2d(np.zeros((6, 6)), s) == 0)


def test_zero_state_gives_minus_phi():
    phi = np.arange(5.0)
    r = residual_1d(np.zeros(5), spec1(p=4, phi=phi))
    assert np.array_equal(r[1:-1], -phi[1:-1])


def test_hand_stencil_center_value():
    u = np.array([0.0, 1.0, 2.0, 1.0, 0.0])
    r = residual_1d(u, spec1())
    assert r[2] == pytest.approx(34.0, abs=1e-12)
    # off-center nodes have a zero second difference: (0 - 2 + 2) and (2 - 2 + 0)
    phi = elliptic_apply(u, spec1())
    assert np.allclose(phi[1:-1], [1.0, 34.0, 1.0], atol=1e-12)


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        residual_1d(np.zeros(6), spec1())
    with pytest.raises(GridMismatchError):
        residual_2d(np.zeros((5, 5)), spec1())


def brute_2d(u, k, p, h):
    """Direct loop over the divergence-of-flux formula."""
    n = u.shape[0]
    out = np.zeros_like(u)
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            def w(a, b):
                return u[a, b] ** p
            fxp = 0.5 * (k[0, i, j] + k[0, i + 1, j]) * (0.5 * (u[i, j] + u[i + 1, j])) ** p * (u[i + 1, j] - u[i, j]) / h
            fxm = 0.5 * (k[0, i, j] + k[0, i - 1, j]) * (0.5 * (u[i, j] + u[i - 1, j])) ** p * (u[i, j] - u[i - 1, j]) / h
            fyp = 0.5 * (k[3, i, j] + k[3, i, j + 1]) * (0.5 * (u[i, j] + u[i, j + 1])) ** p * (u[i, j + 1] - u[i, j]) / h
            fym = 0.5 * (k[3, i, j] + k[3, i, j - 1]) * (0.5 * (u[i, j] + u[i, j - 1])) ** p * (u[i, j] - u[i, j - 1]) / h
            # d/dx (K12 w d/dy u) + d/dy (K21 w d/dx u), everything centered
            gx_p = k[1, i + 1, j] * w(i + 1, j) * (u[i + 1, j + 1] - u[i + 1, j - 1]) / (2 * h)
            gx_m = k[1, i - 1, j] * w(i - 1, j) * (u[i - 1, j + 1] - u[i - 1, j - 1]) / (2 * h)
            gy_p = k[2, i, j + 1] * w(i, j + 1) * (u[i + 1, j + 1] - u[i - 1, j + 1]) / (2 * h)
            gy_m = k[2, i, j - 1] * w(i, j - 1) * (u[i + 1, j - 1] - u[i - 1, j - 1]) / (2 * h)
            div = (fxp - fxm) / h + (fyp - fym) / h + (gx_p - gx_m) / (2 * h) + (gy_p - gy_m) / (2 * h)
            out[i, j] = u[i, j] - div
    return out


def test_2d_bump_center():
    n = 5
    u = np.zeros((n, n))
    u[2, 2] = 1.0
    s = ProblemSpec(Grid(2, n), 2, iso_k2(n), np.zeros((n, n)))
    r = residual_2d(u, s)
    # all four midpoint weights are (1/2)^2, the four fluxes are -/+ 1/h
    h = 0.25
    assert r[2, 2] == pytest.approx(1.0 + 4 * 0.25 / h ** 2, rel=1e-14)
    assert np.allclose(r[1:-1, 1:-1], brute_2d(u, s.k, 2, h)[1:-1, 1:-1], rtol=1e-13, atol=1e-12)


def test_2d_against_brute_force_anisotropic():
    rng = np.random.default_rng(3)
    n = 7
    u = rng.uniform(0.2, 1.0, (n, n))
    u[Grid(2, n).boundary_mask()] = 0.0
    a = rng.uniform(0.5, 1.5, (n, n))
    k = np.stack([a * 1.0, a * 0.3, a * 0.3, a * 0.8])
    s = ProblemSpec(Grid(2, n), 4, k, np.zeros((n, n)))
    assert np.allclose(residual_2d(u, s)[1:-1, 1:-1], brute_2d(u, k, 4, 1 / (n - 1))[1:-1, 1:-1],
                       rtol=1e-12, atol=1e-10)


def test_2d_reduces_to_1d():
    n = 9
    x = np.linspace(0, 1, n)
    prof = np.sin(np.pi * x)
    u = np.repeat(prof[:, None], n, axis=1)
    kx = 1.0 + x
    k = np.zeros((4, n, n))
    k[0] = np.repeat(kx[:, None], n, axis=1)
    k[3] = 1.0
    s2 = ProblemSpec(Grid(2, n), 2, k, np.zeros((n, n)))
    s1 = ProblemSpec(Grid(1, n), 2, kx, np.zeros(n))
    r2 = residual_2d(u, s2)
    r1 = residual_1d(prof, s1)
    for j in range(1, n - 1):
        assert np.allclose(r2[1:-1, j], r1[1:-1], rtol=1e-12, atol=1e-10)


def test_roundtrip_exact_zero():
    rng = np.random.default_rng(0)
    for dim, n in ((1, 20), (2, 12)):
        g = Grid(dim, n)
        u = rng.uniform(0.1, 2.0, g.shape) * bubble(g)
        if dim == 1:
            k = rng.uniform(0.5, 2.0, n)
        else:
            a = rng.uniform(0.5, 2.0, (n, n))
            k = np.stack([a, 0.2 * a, 0.2 * a, a])
        s = ProblemSpec(g, 4, k, None, 2.0)
        phi = elliptic_apply(u, s)
        r = residual(u, s.with_phi(phi))
        assert np.all(r[g.interior()] == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 20), st.sampled_from([0, 2, 4]), st.integers(0, 10_000))
def test_linear_in_phi(n, p, seed):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, 1, n)
    k = rng.uniform(0.5, 1.5, n)
    p1, p2 = rng.normal(size=n), rng.normal(size=n)
    g = Grid(1, n)
    r1 = residual_1d(u, ProblemSpec(g, p, k, p1))
    r2 = residual_1d(u, ProblemSpec(g, p, k, p2))
    assert np.allclose((r1 - r2)[1:-1], (p2 - p1)[1:-1], atol=1e-12 * (1 + np.abs(r1).max()))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_p0_superposition(seed):
    rng = np.random.default_rng(seed)
    n = 10
    s = ProblemSpec(Grid(2, n), 0, iso_k2(n) * 1.5, rng.normal(size=(n, n)))
    u, v = rng.normal(size=(n, n)), rng.normal(size=(n, n))
    r0 = residual_2d(np.zeros((n, n)), s)

    def lin(w):
        return residual_2d(w, s) - r0
    assert np.allclose(lin(u + 2 * v), lin(u) + 2 * lin(v), atol=1e-9)


def pick_exact_laplacian_1d(n):
    x = np.linspace(0, 1, n)
    u = np.sin(np.pi * x)
    # u - d/dx((1 + x) d/dx u) with p = 0
    phi = u - (np.pi * np.cos(np.pi * x) - (1 + x) * np.pi ** 2 * np.sin(np.pi * x))
    return u, 1 + x, phi


def test_consistency_order_1d():
    errs = []
    for n in (33, 65, 129):
        u, k, phi = pick_exact_laplacian_1d(n)
        r = residual_1d(u, ProblemSpec(Grid(1, n), 0, k, phi))
        errs.append(np.abs(r).max())
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 1.8) & (orders < 2.2))


def test_first_derivative_examples():
    x = np.linspace(0, 1, 5)
    assert np.allclose(first_derivative(np.full(5, 3.0)), 0.0)
    assert np.allclose(first_derivative(x)[1:-1], 1.0)
    assert np.allclose(first_derivative(x ** 2)[1:-1], 2 * x[1:-1], atol=1e-14)
    with pytest.raises(ValueError):
        first_derivative(x, axis=1)
    xx, yy = Grid(2, 6).coords()
    assert np.allclose(first_derivative(yy, axis=1), 1.0)
    assert np.allclose(first_derivative(yy, axis=0), 0.0)


def test_first_derivative_adjoint():
    rng = np.random.default_rng(1)
    for shape, dim in (((3, 9), 1), ((2, 7, 7), 2)):
        for axis in range(dim):
            a, b = rng.normal(size=shape), rng.normal(size=shape)
            lhs = np.sum(first_derivative(a, axis, dim) * b)
            rhs = np.sum(a * first_derivative_adjoint(b, axis, dim))
            assert lhs == pytest.approx(rhs, rel=1e-12)


def test_dense_jacobian_p0_tridiagonal():
    n, alpha = 7, 1.5
    s = spec1(n, 0, alpha, phi=np.zeros(n))
    jac = dense_jacobian(lambda u: residual_1d(u, s), np.zeros(n))
    c = alpha / s.grid.h ** 2
    interior = jac[1:-1]
    expected = np.zeros((n - 2, n))
    for i in range(1, n - 1):
        expected[i - 1, i - 1:i + 2] = [-c, 1 + 2 * c, -c]
    assert np.allclose(interior, expected, rtol=1e-7)
    block = jac[1:-1, 1:-1]
    assert np.allclose(block, block.T, rtol=1e-7)


def test_batch_residual_matches_single():
    rng = np.random.default_rng(2)
    n = 11
    g = Grid(2, n)
    a = rng.uniform(0.5, 1.0, (3, n, n))
    k = np.stack([a, 0.1 * a, 0.1 * a, a], axis=1)
    u = rng.uniform(0, 1, (3, n, n))
    phi = rng.normal(size=(3, n, n))
    rb = batch_residual(u, k, phi, 2, 1.0, 2)
    for b in range(3):
        r = residual_2d(u[b], ProblemSpec(g, 2, k[b], phi[b]))
        assert np.allclose(rb[b], r, rtol=1e-13, atol=1e-11)


def test_numpy_and_loop_kernels_agree():
    rng = np.random.default_rng(4)
    u = rng.uniform(0, 2, 50)
    k = rng.uniform(0.5, 2, 50)
    a = kernels._elliptic_1d_loop(u, k, 4, 2.0, 1 / 49)
    b = kernels._elliptic_1d_np(u, k, 4, 2.0, 1 / 49)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-10)
    u2 = rng.uniform(0, 2, (12, 12))
    kk = rng.uniform(0.5, 1, (4, 12, 12))
    assert np.allclose(kernels._elliptic_2d_loop(u2, kk, 2, 1.0, 1 / 11),
                       kernels._elliptic_2d_np(u2, kk, 2, 1.0, 1 / 11), rtol=1e-13, atol=1e-10)


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_field_roundtrip(tmp_path, suffix):
    rng = np.random.default_rng(5)
    for g in (Grid(1, 9), Grid(2, 6)):
        f = Field(g, rng.normal(size=g.shape), "phi")
        path = tmp_path / f"f{g.dim}{suffix}"
        save_field(f, path)
        back = load_field(path)
        assert back.grid == g and back.name == "phi"
        assert np.array_equal(back.values, f.values)


def test_field_rejects_nonfinite():
    with pytest.raises(ValueError):
        Field(Grid(1, 4), [0, np.nan, 0, 0])
