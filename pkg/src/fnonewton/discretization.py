"""Finite-difference residuals for the nonlinear (anisotropic) diffusion problem.

The discrete problem on the unit interval/square with homogeneous Dirichlet
data reads

    F(u; k, phi) = u - alpha0 * div_h(k u^p grad_h u) - phi = 0

on interior nodes, with the Dirichlet rows ``F_i = u_i`` on the boundary.
"""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

K_CHANNELS_2D = ("K11", "K12", "K21", "K22")


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform tensor-product mesh of the unit interval (dim=1) or square (dim=2)."""

    dim: int
    n: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 3:
            raise ValueError(f"need at least 3 points per axis, got {self.n}")

    @property
    def h(self):
        return 1.0 / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def size(self):
        return self.n ** self.dim

    def axis(self):
        return np.linspace(0.0, 1.0, self.n)

    def coords(self):
        """Node coordinates, one array per axis, each shaped like ``self.shape``."""
        x = self.axis()
        if self.dim == 1:
            return (x,)
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def boundary_mask(self):
        m = np.zeros(self.shape, dtype=bool)
        if self.dim == 1:
            m[[0, -1]] = True
        else:
            m[[0, -1], :] = True
            m[:, [0, -1]] = True
        return m

    def interior(self):
        """Index expression selecting interior nodes."""
        return (slice(1, -1),) * self.dim

    @classmethod
    def for_array(cls, a, dim):
        return cls(dim, a.shape[-1])


def bubble(grid):
    """Polynomial that vanishes on the boundary.

    ``x(1-x)`` in 1D and ``16 x(1-x) y(1-y)`` in 2D.
    """
    if grid.dim == 1:
        (x,) = grid.coords()
        return x * (1.0 - x)
    x, y = grid.coords()
    return 16.0 * x * (1.0 - x) * y * (1.0 - y)


@dataclass
class Field:
    """A named real field sampled on a grid (used for serialization)."""

    grid: Grid
    values: np.ndarray
    name: str = "u"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"field {self.name!r} has non-finite entries")


@dataclass
class ProblemSpec:
    """Coefficients of one discrete problem.

    ``k`` has the grid shape in 1D and shape ``(4, n, n)`` in 2D (channels
    K11, K12, K21, K22). ``phi`` may be None for operator-only use.
    """

    grid: Grid
    p: int
    k: np.ndarray
    phi: np.ndarray = None
    alpha0: float = 1.0
    k_min: float = 0.0
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 0 or self.p % 2:
            raise ValueError(f"p must be an even nonnegative integer, got {self.p}")
        self.p = int(self.p)
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        self.k = np.asarray(self.k, dtype=np.float64)
        kshape = self.grid.shape if self.grid.dim == 1 else (4,) + self.grid.shape
        if self.k.shape != kshape:
            raise GridMismatchError(f"k has shape {self.k.shape}, expected {kshape}")
        if self.phi is not None:
            self.phi = np.asarray(self.phi, dtype=np.float64)
            if self.phi.shape != self.grid.shape:
                raise GridMismatchError(f"phi has shape {self.phi.shape}, expected {self.grid.shape}")
        if self.check:
            self._validate_k()

    def _validate_k(self):
        if self.grid.dim == 1:
            if np.any(self.k <= self.k_min):
                raise ValueError(f"k must exceed {self.k_min} everywhere")
            return
        k11, k12, k21, k22 = self.k
        if not np.array_equal(k12, k21):
            raise ValueError("K12 and K21 channels differ: diffusion tensor must be symmetric")
        det = k11 * k22 - k12 * k21
        if np.any(k11 <= 0) or np.any(det <= 0):
            raise ValueError("diffusion tensor is not positive definite at every node")

    def with_phi(self, phi):
        return ProblemSpec(self.grid, self.p, self.k, phi, self.alpha0, self.k_min, check=False)

    @property
    def n_channels(self):
        """Network input channels: phi followed by the diffusion channels."""
        return 2 if self.grid.dim == 1 else 5

    def inputs(self):
        """Stacked network input ``(n_c, *grid.shape)``: phi first, then k."""
        if self.grid.dim == 1:
            return np.stack([self.phi, self.k])
        return np.concatenate([self.phi[None], self.k])


def _check_u(u, spec, dim):
    if spec.grid.dim != dim:
        raise GridMismatchError(f"expected a {dim}D problem, got {spec.grid.dim}D")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != spec.grid.shape:
        raise GridMismatchError(f"u has shape {u.shape}, grid expects {spec.grid.shape}")
    return u


def elliptic_apply(u, spec):
    """Return phi = u - alpha0 div(k u^p grad u) on interior nodes (zero on the boundary).

    By construction ``residual(u, spec.with_phi(elliptic_apply(u, spec)))``
    vanishes exactly on interior nodes.
    """
    u = _check_u(u, spec, spec.grid.dim)
    if spec.grid.dim == 1:
        return kernels.elliptic_1d(u, spec.k, spec.p, spec.alpha0, spec.grid.h)
    return kernels.elliptic_2d(u, spec.k, spec.p, spec.alpha0, spec.grid.h)


def _finish_residual(u, e, phi, grid):
    r = e - phi
    bm = grid.boundary_mask()
    r[bm] = u[bm]
    return r


def residual_1d(u, spec):
    u = _check_u(u, spec, 1)
    e = kernels.elliptic_1d(u, spec.k, spec.p, spec.alpha0, spec.grid.h)
    return _finish_residual(u, e, spec.phi, spec.grid)


def residual_2d(u, spec):
    u = _check_u(u, spec, 2)
    e = kernels.elliptic_2d(u, spec.k, spec.p, spec.alpha0, spec.grid.h)
    return _finish_residual(u, e, spec.phi, spec.grid)


def residual(u, spec):
    if spec.grid.dim == 1:
        return residual_1d(u, spec)
    return residual_2d(u, spec)


def batch_residual(u, k, phi, p, alpha0, dim):
    """Residual for a batch ``u[b, ...]`` with matching ``k`` and ``phi``."""
    h = 1.0 / (u.shape[-1] - 1)
    if dim == 1:
        e = kernels._elliptic_1d_np(u, k, p, alpha0, h)
        r = e - phi
        r[..., 0] = u[..., 0]
        r[..., -1] = u[..., -1]
    else:
        e = kernels._elliptic_2d_np(u, k, p, alpha0, h)
        r = e - phi
        for sl in ((Ellipsis, 0, slice(None)), (Ellipsis, -1, slice(None)),
                   (Ellipsis, slice(None), 0), (Ellipsis, slice(None), -1)):
            r[sl] = u[sl]
    return r


def batch_residual_vjp(u, k, p, alpha0, dim, g):
    """Adjoint of ``batch_residual`` in ``u``: returns J(u)^T g batched."""
    h = 1.0 / (u.shape[-1] - 1)
    if dim == 1:
        out = kernels.elliptic_vjp_1d(u, k, p, alpha0, h, g)
        out[..., 0] += g[..., 0]
        out[..., -1] += g[..., -1]
        return out
    out = kernels.elliptic_vjp_2d(u, k, p, alpha0, h, g)
    bm = np.zeros(u.shape[-2:], dtype=bool)
    bm[[0, -1], :] = True
    bm[:, [0, -1]] = True
    out[..., bm] += g[..., bm]
    return out


def first_derivative(u, axis=0, dim=None, h=None):
    """Centered first difference along spatial ``axis``; one-sided at the ends.

    The spatial axes are the trailing ``dim`` axes of ``u`` (default: all of
    them), so batched arrays work by passing ``dim`` explicitly.
    """
    u = np.asarray(u, dtype=np.float64)
    dim = u.ndim if dim is None else dim
    if dim not in (1, 2) or not 0 <= axis < dim:
        raise ValueError(f"axis {axis} invalid for a {dim}D field")
    ax = u.ndim - dim + axis
    n = u.shape[ax]
    if h is None:
        h = 1.0 / (n - 1)

    def sl(a, b):
        return (slice(None),) * ax + (slice(a, b),)

    d = np.empty_like(u)
    d[sl(1, -1)] = (u[sl(2, None)] - u[sl(None, -2)]) / (2.0 * h)
    d[sl(0, 1)] = (u[sl(1, 2)] - u[sl(0, 1)]) / h
    d[sl(-1, None)] = (u[sl(-1, None)] - u[sl(-2, -1)]) / h
    return d


def first_derivative_adjoint(g, axis=0, dim=None, h=None):
    """Transpose of ``first_derivative`` applied to ``g``."""
    g = np.asarray(g, dtype=np.float64)
    dim = g.ndim if dim is None else dim
    ax = g.ndim - dim + axis
    n = g.shape[ax]
    if h is None:
        h = 1.0 / (n - 1)

    def sl(a, b):
        return (slice(None),) * ax + (slice(a, b),)

    out = np.zeros_like(g)
    c = g[sl(1, -1)] / (2.0 * h)
    out[sl(2, None)] += c
    out[sl(None, -2)] -= c
    out[sl(1, 2)] += g[sl(0, 1)] / h
    out[sl(0, 1)] -= g[sl(0, 1)] / h
    out[sl(-1, None)] += g[sl(-1, None)] / h
    out[sl(-2, -1)] -= g[sl(-1, None)] / h
    return out


def dense_jacobian(fun, u, eps=1e-6):
    """Central-difference Jacobian of ``fun`` at ``u`` (test oracle, small sizes only)."""
    u = np.asarray(u, dtype=np.float64)
    flat = u.ravel()
    n = flat.size
    jac = np.empty((np.asarray(fun(u)).size, n))
    for j in range(n):
        up = flat.copy()
        um = flat.copy()
        up[j] += eps
        um[j] -= eps
        jac[:, j] = (np.ravel(fun(up.reshape(u.shape))) - np.ravel(fun(um.reshape(u.shape)))) / (2 * eps)
    return jac


# --------------------------------------------------------------------------
# field files: ``.csv`` (header line, then rows) or flat little-endian binary

_FIELD_MAGIC = b"FNOFLD01"


def save_field(field, path):
    path = str(path)
    g = field.grid
    if path.endswith(".csv"):
        with open(path, "w") as fh:
            fh.write(f"# dim={g.dim} n={g.n} name={field.name}\n")
            rows = field.values.reshape(1, -1) if g.dim == 1 else field.values
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return
    name = field.name.encode()
    with open(path, "wb") as fh:
        fh.write(_FIELD_MAGIC)
        fh.write(np.array([g.dim, g.n, len(name)], dtype="<i8").tobytes())
        fh.write(name)
        fh.write(field.values.astype("<f8").tobytes())


def load_field(path):
    path = str(path)
    if path.endswith(".csv"):
        with open(path) as fh:
            header = fh.readline()
            if not header.startswith("#"):
                raise ValueError(f"{path}: missing field header")
            meta = dict(tok.split("=", 1) for tok in header[1:].split())
            vals = np.loadtxt(fh, delimiter=",", ndmin=2)
        grid = Grid(int(meta["dim"]), int(meta["n"]))
        return Field(grid, vals.reshape(grid.shape), meta.get("name", "u"))
    raw = open(path, "rb").read()
    if raw[:8] != _FIELD_MAGIC:
        raise ValueError(f"{path}: not a field file")
    dim, n, ln = (int(v) for v in np.frombuffer(raw[8:32], dtype="<i8"))
    name = raw[32:32 + ln].decode()
    grid = Grid(dim, n)
    vals = np.frombuffer(raw[32 + ln:], dtype="<f8")
    if vals.size != grid.size:
        raise ValueError(f"{path}: expected {grid.size} values, found {vals.size}")
    return Field(grid, vals.reshape(grid.shape).copy(), name)
