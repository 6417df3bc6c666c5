"""Stencil kernels for the nonlinear diffusion operator.

Each operator has a loop kernel (compiled by numba when enabled) and a
vectorized numpy twin that also accepts leading batch axes. The dispatchers
at the bottom pick the loop kernel for single unbatched fields when numba is
on, and the numpy twin otherwise.

Conventions: ``u[..., i]`` in 1D, ``u[..., i, j]`` in 2D with ``i`` along x.
The 2D diffusion tensor is stacked as ``k[..., c, i, j]`` with channel order
K11, K12, K21, K22. Boundary entries of the returned operator are zero; the
residual adds the Dirichlet rows itself.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


# --------------------------------------------------------------------------
# loop kernels

@njit
def _elliptic_1d_into(u, k, p, alpha, h, out):
    n = u.shape[0]
    inv_h2 = 1.0 / (h * h)
    # flux at i + 1/2
    fl_prev = 0.5 * (k[0] + k[1]) * (0.5 * (u[0] + u[1])) ** p * (u[1] - u[0])
    for i in range(1, n - 1):
        fl = 0.5 * (k[i] + k[i + 1]) * (0.5 * (u[i] + u[i + 1])) ** p * (u[i + 1] - u[i])
        out[i] = u[i] - alpha * ((fl - fl_prev) * inv_h2)
        fl_prev = fl


@njit
def _elliptic_1d_loop(u, k, p, alpha, h):
    out = np.zeros(u.shape[0])
    _elliptic_1d_into(u, k, p, alpha, h, out)
    return out


@njit
def _elliptic_2d_into(u, k, p, alpha, h, out):
    n = u.shape[0]
    inv_h2 = 1.0 / (h * h)
    inv_2h = 0.5 / h
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            uc = u[i, j]
            # midpoint fluxes along x
            fxp = (0.5 * (k[0, i, j] + k[0, i + 1, j]) * (0.5 * (uc + u[i + 1, j])) ** p
                   * (u[i + 1, j] - uc))
            fxm = (0.5 * (k[0, i - 1, j] + k[0, i, j]) * (0.5 * (u[i - 1, j] + uc)) ** p
                   * (uc - u[i - 1, j]))
            fyp = (0.5 * (k[3, i, j] + k[3, i, j + 1]) * (0.5 * (uc + u[i, j + 1])) ** p
                   * (u[i, j + 1] - uc))
            fym = (0.5 * (k[3, i, j - 1] + k[3, i, j]) * (0.5 * (u[i, j - 1] + uc)) ** p
                   * (uc - u[i, j - 1]))
            # cross terms: centered differences of centered gradients
            cxp = k[1, i + 1, j] * u[i + 1, j] ** p * ((u[i + 1, j + 1] - u[i + 1, j - 1]) * inv_2h)
            cxm = k[1, i - 1, j] * u[i - 1, j] ** p * ((u[i - 1, j + 1] - u[i - 1, j - 1]) * inv_2h)
            cyp = k[2, i, j + 1] * u[i, j + 1] ** p * ((u[i + 1, j + 1] - u[i - 1, j + 1]) * inv_2h)
            cym = k[2, i, j - 1] * u[i, j - 1] ** p * ((u[i + 1, j - 1] - u[i - 1, j - 1]) * inv_2h)
            div = ((fxp - fxm) * inv_h2 + (fyp - fym) * inv_h2
                   + (cxp - cxm) * inv_2h + (cyp - cym) * inv_2h)
            out[i, j] = uc - alpha * div


@njit
def _elliptic_2d_loop(u, k, p, alpha, h):
    n = u.shape[0]
    out = np.zeros((n, n))
    _elliptic_2d_into(u, k, p, alpha, h, out)
    return out


# --------------------------------------------------------------------------
# fused residual / matrix-free GMRES for the elliptic problem (numba path)
#
# Flat state vectors; ``k`` and ``phi`` are flattened too. Mirrors
# jfnk.krylov_solve with the Jacobian-vector product inlined, so a whole
# inner solve runs without returning to Python.

_SQRT_EPS = 1.4901161193847656e-08


@njit
def _residual_flat(u, k, phi, p, alpha, h, dim, n, out):
    if dim == 1:
        _elliptic_1d_into(u, k, p, alpha, h, out)
        for i in range(1, n - 1):
            out[i] -= phi[i]
        out[0] = u[0]
        out[n - 1] = u[n - 1]
    else:
        u2 = u.reshape((n, n))
        o2 = out.reshape((n, n))
        _elliptic_2d_into(u2, k.reshape((4, n, n)), p, alpha, h, o2)
        ph = phi.reshape((n, n))
        for i in range(n):
            for j in range(n):
                if i == 0 or j == 0 or i == n - 1 or j == n - 1:
                    o2[i, j] = u2[i, j]
                else:
                    o2[i, j] -= ph[i, j]


@njit
def _nrm2(a):
    s = 0.0
    for i in range(a.shape[0]):
        s += a[i] * a[i]
    return np.sqrt(s)


@njit
def _jvp_flat(u, unorm, v, f0, k, phi, p, alpha, h, dim, n, tmp, out):
    """Forward-difference F'(u) v into ``out``; False if non-finite."""
    vn = _nrm2(v)
    if vn == 0.0:
        out[:] = 0.0
        return True
    eps = _SQRT_EPS * (1.0 + unorm) / vn
    for i in range(u.shape[0]):
        tmp[i] = u[i] + eps * v[i]
    _residual_flat(tmp, k, phi, p, alpha, h, dim, n, out)
    ok = True
    for i in range(u.shape[0]):
        out[i] = (out[i] - f0[i]) / eps
        if not np.isfinite(out[i]):
            ok = False
    return ok


@njit
def _gmres_elliptic(u, f0, k, phi, p, alpha, h, dim, n, rhs, tol_rel,
                    restart, max_inner, recycle, outer, n_outer):
    """Returns (x, rel_residual, converged, breakdown, matvecs, n_outer, status).

    ``outer`` (recycle rows) is updated in place, newest first; status 1
    flags a non-finite residual evaluation.
    """
    size = rhs.shape[0]
    x = np.zeros(size)
    b_norm = _nrm2(rhs)
    if b_norm == 0.0:
        return x, 0.0, True, False, 0, n_outer, 0
    unorm = _nrm2(u)
    target = tol_rel * b_norm
    tmp = np.empty(size)
    w = np.empty(size)
    r = rhs.copy()
    r_norm = b_norm
    matvecs = 0
    breakdown = False
    while r_norm > target and matvecs < max_inner:
        m = min(restart, max_inner - matvecs)
        naug = min(n_outer, recycle)
        total = m + naug
        V = np.zeros((total + 1, size))
        Z = np.zeros((total, size))
        H = np.zeros((total + 1, total))
        cs = np.zeros(total)
        sn = np.zeros(total)
        g = np.zeros(total + 1)
        hc = np.zeros(total + 1)
        for i in range(size):
            V[0, i] = r[i] / r_norm
        g[0] = r_norm
        done = 0
        cycle_breakdown = False
        for j in range(total):
            if j < m:
                Z[j] = V[j]
            else:
                Z[j] = outer[j - m]
            if not _jvp_flat(u, unorm, Z[j], f0, k, phi, p, alpha, h, dim, n, tmp, w):
                return x, r_norm / b_norm, False, False, matvecs, n_outer, 1
            matvecs += 1
            w_norm0 = _nrm2(w)
            # classical Gram-Schmidt, applied twice
            for i in range(j + 1):
                hc[i] = np.dot(V[i], w)
            for i in range(j + 1):
                w -= hc[i] * V[i]
            for i in range(j + 1):
                c = np.dot(V[i], w)
                w -= c * V[i]
                hc[i] += c
            hn = _nrm2(w)
            for i in range(j + 1):
                H[i, j] = hc[i]
            H[j + 1, j] = hn
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            a = H[j, j]
            b = H[j + 1, j]
            if b == 0.0:
                cs[j] = 1.0
                sn[j] = 0.0
            else:
                rr = np.hypot(a, b)
                cs[j] = a / rr
                sn[j] = b / rr
            H[j, j] = cs[j] * a + sn[j] * b
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            done = j + 1
            if hn <= 1e-13 * max(w_norm0, 1e-300):
                cycle_breakdown = True
                break
            for i in range(size):
                V[j + 1, i] = w[i] / hn
            if abs(g[j + 1]) <= target:
                break
        keep = done
        while keep > 0 and abs(H[keep - 1, keep - 1]) <= 1e-300:
            keep -= 1
        if keep == 0:
            breakdown = True
            break
        y = np.zeros(keep)
        for i in range(keep - 1, -1, -1):
            acc = g[i]
            for l in range(i + 1, keep):
                acc -= H[i, l] * y[l]
            y[i] = acc / H[i, i]
        dx = np.zeros(size)
        for i in range(keep):
            dx += y[i] * Z[i]
        x += dx
        dxn = _nrm2(dx)
        if recycle > 0 and dxn > 0.0:
            top = min(n_outer, recycle - 1)
            for i in range(top, 0, -1):
                outer[i] = outer[i - 1]
            for i in range(size):
                outer[0, i] = dx[i] / dxn
            n_outer = min(n_outer + 1, recycle)
        if not _jvp_flat(u, unorm, x, f0, k, phi, p, alpha, h, dim, n, tmp, w):
            return x, r_norm / b_norm, False, False, matvecs, n_outer, 1
        matvecs += 1
        for i in range(size):
            r[i] = rhs[i] - w[i]
        r_norm = _nrm2(r)
        if cycle_breakdown:
            breakdown = r_norm > target
            break
    return x, r_norm / b_norm, r_norm <= target, breakdown, matvecs, n_outer, 0


# --------------------------------------------------------------------------
# numpy twins (batched over leading axes)

def _elliptic_1d_np(u, k, p, alpha, h):
    inv_h2 = 1.0 / (h * h)
    fl = 0.5 * (k[..., :-1] + k[..., 1:]) * (0.5 * (u[..., :-1] + u[..., 1:])) ** p * (u[..., 1:] - u[..., :-1])
    out = np.zeros(np.broadcast_shapes(u.shape, k.shape))
    out[..., 1:-1] = u[..., 1:-1] - alpha * ((fl[..., 1:] - fl[..., :-1]) * inv_h2)
    return out


def _elliptic_2d_np(u, k, p, alpha, h):
    inv_h2 = 1.0 / (h * h)
    inv_2h = 0.5 / h
    k11, k12, k21, k22 = k[..., 0, :, :], k[..., 1, :, :], k[..., 2, :, :], k[..., 3, :, :]
    # fx[i] lives at i + 1/2 along x, fy[j] at j + 1/2 along y
    fx = (0.5 * (k11[..., :-1, :] + k11[..., 1:, :]) * (0.5 * (u[..., :-1, :] + u[..., 1:, :])) ** p
          * (u[..., 1:, :] - u[..., :-1, :]))
    fy = (0.5 * (k22[..., :, :-1] + k22[..., :, 1:]) * (0.5 * (u[..., :, :-1] + u[..., :, 1:])) ** p
          * (u[..., :, 1:] - u[..., :, :-1]))
    w = u ** p
    # cx[i, j] = K12 w dy(u), defined for interior j only
    cx = k12[..., :, 1:-1] * w[..., :, 1:-1] * ((u[..., :, 2:] - u[..., :, :-2]) * inv_2h)
    cy = k21[..., 1:-1, :] * w[..., 1:-1, :] * ((u[..., 2:, :] - u[..., :-2, :]) * inv_2h)
    fxp = fx[..., 1:, 1:-1]
    fxm = fx[..., :-1, 1:-1]
    fyp = fy[..., 1:-1, 1:]
    fym = fy[..., 1:-1, :-1]
    cxp = cx[..., 2:, :]
    cxm = cx[..., :-2, :]
    cyp = cy[..., :, 2:]
    cym = cy[..., :, :-2]
    div = ((fxp - fxm) * inv_h2 + (fyp - fym) * inv_h2
           + (cxp - cxm) * inv_2h + (cyp - cym) * inv_2h)
    out = np.zeros(np.broadcast_shapes(u.shape, k11.shape))
    out[..., 1:-1, 1:-1] = u[..., 1:-1, 1:-1] - alpha * div
    return out


def _dpow(x, p):
    """Derivative of x**p, safe at p == 0."""
    if p == 0:
        return np.zeros_like(x)
    return p * x ** (p - 1)


def _elliptic_vjp_1d_np(u, k, p, alpha, h, g):
    """Transpose-Jacobian product of the interior rows of the 1D operator."""
    c = alpha / (h * h)
    gi = np.zeros_like(g)
    gi[..., 1:-1] = g[..., 1:-1]
    km = 0.5 * (k[..., :-1] + k[..., 1:])
    um = 0.5 * (u[..., :-1] + u[..., 1:])
    du = u[..., 1:] - u[..., :-1]
    # row i holds -c * (fl[i] - fl[i-1])
    gfl = -c * gi[..., :-1] + c * gi[..., 1:]
    a = km * 0.5 * _dpow(um, p) * du
    b = km * um ** p
    out = gi.copy()
    out[..., :-1] += gfl * (a - b)
    out[..., 1:] += gfl * (a + b)
    return out


def _elliptic_vjp_2d_np(u, k, p, alpha, h, g):
    """Transpose-Jacobian product of the interior rows of the 2D operator."""
    c = alpha / (h * h)
    c2 = alpha * 0.5 / h
    inv_2h = 0.5 / h
    gi = np.zeros_like(g)
    gi[..., 1:-1, 1:-1] = g[..., 1:-1, 1:-1]
    k11, k12, k21, k22 = k[..., 0, :, :], k[..., 1, :, :], k[..., 2, :, :], k[..., 3, :, :]
    out = gi.copy()

    # x fluxes
    km = 0.5 * (k11[..., :-1, :] + k11[..., 1:, :])
    um = 0.5 * (u[..., :-1, :] + u[..., 1:, :])
    du = u[..., 1:, :] - u[..., :-1, :]
    gf = -c * gi[..., :-1, :] + c * gi[..., 1:, :]
    a = km * 0.5 * _dpow(um, p) * du
    b = km * um ** p
    out[..., :-1, :] += gf * (a - b)
    out[..., 1:, :] += gf * (a + b)

    # y fluxes
    km = 0.5 * (k22[..., :, :-1] + k22[..., :, 1:])
    um = 0.5 * (u[..., :, :-1] + u[..., :, 1:])
    du = u[..., :, 1:] - u[..., :, :-1]
    gf = -c * gi[..., :, :-1] + c * gi[..., :, 1:]
    a = km * 0.5 * _dpow(um, p) * du
    b = km * um ** p
    out[..., :, :-1] += gf * (a - b)
    out[..., :, 1:] += gf * (a + b)

    w = u ** p
    dw = _dpow(u, p)
    # cx[i, j] = K12 w (u[i, j+1] - u[i, j-1]) / 2h, j interior; enters rows i-1 (-) and i+1 (+)
    gcx = np.zeros_like(g)
    gcx[..., 1:, :] -= c2 * gi[..., :-1, :]
    gcx[..., :-1, :] += c2 * gi[..., 1:, :]
    gcx = gcx[..., :, 1:-1]
    gy = (u[..., :, 2:] - u[..., :, :-2]) * inv_2h
    kk = k12[..., :, 1:-1]
    out[..., :, 1:-1] += gcx * kk * dw[..., :, 1:-1] * gy
    t = gcx * kk * w[..., :, 1:-1] * inv_2h
    out[..., :, 2:] += t
    out[..., :, :-2] -= t

    # cy[i, j] = K21 w (u[i+1, j] - u[i-1, j]) / 2h, i interior; enters cols j-1 (-) and j+1 (+)
    gcy = np.zeros_like(g)
    gcy[..., :, 1:] -= c2 * gi[..., :, :-1]
    gcy[..., :, :-1] += c2 * gi[..., :, 1:]
    gcy = gcy[..., 1:-1, :]
    gx = (u[..., 2:, :] - u[..., :-2, :]) * inv_2h
    kk = k21[..., 1:-1, :]
    out[..., 1:-1, :] += gcy * kk * dw[..., 1:-1, :] * gx
    t = gcy * kk * w[..., 1:-1, :] * inv_2h
    out[..., 2:, :] += t
    out[..., :-2, :] -= t
    return out


# --------------------------------------------------------------------------
# dispatch

def elliptic_1d(u, k, p, alpha, h):
    if USE_NUMBA and u.ndim == 1 and k.ndim == 1:
        return _elliptic_1d_loop(np.ascontiguousarray(u, dtype=np.float64),
                                 np.ascontiguousarray(k, dtype=np.float64), int(p), float(alpha), float(h))
    return _elliptic_1d_np(u, k, p, alpha, h)


def elliptic_2d(u, k, p, alpha, h):
    if USE_NUMBA and u.ndim == 2 and k.ndim == 3:
        return _elliptic_2d_loop(np.ascontiguousarray(u, dtype=np.float64),
                                 np.ascontiguousarray(k, dtype=np.float64), int(p), float(alpha), float(h))
    return _elliptic_2d_np(u, k, p, alpha, h)


def elliptic_vjp_1d(u, k, p, alpha, h, g):
    return _elliptic_vjp_1d_np(u, k, p, alpha, h, g)


def elliptic_vjp_2d(u, k, p, alpha, h, g):
    return _elliptic_vjp_2d_np(u, k, p, alpha, h, g)
